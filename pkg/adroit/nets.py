"""
Differentiable networks for ADROIT
==================================

Encoder E, generator G, proxy classifier C (label + rotation heads),
state discriminator D and target learner T (label + rotation heads), all
desk-scale and width-configurable. Parameters are initialised from a named
random stream, never from the global torch RNG.
"""

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector

from adroit.core import ALConfig, InvalidArgumentError, Rng
from adroit.data import NUM_PRETEXT, Batch, make_batch
from adroit.logger import get_logger

logger = get_logger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
PROB_EPS = 1e-7

ImageShape = Tuple[int, int, int]


class Head(str, Enum):
    LABEL = "label"
    ROTATION = "rotation"


def _images(x: Union[Batch, torch.Tensor]) -> torch.Tensor:
    return x.images if isinstance(x, Batch) else x


def _check_image_shape(x: torch.Tensor, expected: ImageShape):
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise InvalidArgumentError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")


def _check_side(image_shape: ImageShape):
    _, h, w = image_shape
    if h != w or h % 8:
        raise InvalidArgumentError(f"images must be square with a side divisible by 8, got {h}x{w}")


# ========================
# Networks
# ========================

class Encoder(nn.Module):
    """Three stride-2 convolutions, then a bias-free linear map to (mu, log-variance)"""

    def __init__(self, image_shape: ImageShape, latent_dim: int, width: int):
        super().__init__()
        _check_side(image_shape)
        channels, side, _ = image_shape
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        reduced = side // 8
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        self.head = nn.Linear(4 * width * reduced * reduced, 2 * latent_dim, bias=False)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.head(self.features(x))
        mu, logvar = out.chunk(2, dim=1)
        return mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class Generator(nn.Module):
    """Mirror of the encoder: linear projection, three transposed convolutions, sigmoid"""

    def __init__(self, image_shape: ImageShape, latent_dim: int, width: int):
        super().__init__()
        _check_side(image_shape)
        channels, side, _ = image_shape
        self.latent_dim = latent_dim
        self.reduced = side // 8
        self.width = width
        self.project = nn.Linear(latent_dim, 4 * width * self.reduced * self.reduced)
        self.deconv = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(4 * width, 2 * width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(width, channels, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.project(z).view(-1, 4 * self.width, self.reduced, self.reduced)
        return self.deconv(h)


class ProxyClassifier(nn.Module):
    """Two-hidden-layer perceptron on latent codes with label and rotation heads"""

    def __init__(self, latent_dim: int, width: int, num_classes: int):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(latent_dim, width),
            nn.ReLU(),
            nn.Linear(width, width),
            nn.ReLU(),
        )
        self.label_head = nn.Linear(width, num_classes)
        self.rotation_head = nn.Linear(width, NUM_PRETEXT)

    def forward(self, z: torch.Tensor, head: Head = Head.LABEL) -> torch.Tensor:
        h = self.trunk(z)
        return self.label_head(h) if Head(head) == Head.LABEL else self.rotation_head(h)


class Discriminator(nn.Module):
    """Five linear layers with leaky-ReLU activations; outputs P(labeled)"""

    def __init__(self, latent_dim: int, width: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(latent_dim, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, 1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z)).squeeze(1).clamp(PROB_EPS, 1.0 - PROB_EPS)


class TargetLearner(nn.Module):
    """Four-convolution image classifier with label and rotation heads"""

    def __init__(self, image_shape: ImageShape, num_classes: int, width: int):
        super().__init__()
        channels = image_shape[0]
        self.image_shape = tuple(image_shape)
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.label_head = nn.Linear(2 * width, num_classes)
        self.rotation_head = nn.Linear(2 * width, NUM_PRETEXT)

    def forward(self, x: torch.Tensor, head: Head = Head.LABEL) -> torch.Tensor:
        h = self.features(x)
        return self.label_head(h) if Head(head) == Head.LABEL else self.rotation_head(h)


# ========================
# Bundle + initialisation
# ========================

@dataclass
class ModelBundle:
    """Theta_VAE (encoder, generator, proxy classifier), theta_D and the target learner zeta"""

    encoder: Encoder
    generator: Generator
    classifier: ProxyClassifier
    discriminator: Discriminator
    target: Optional[TargetLearner] = None

    def vae_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoder.parameters()
        yield from self.generator.parameters()
        yield from self.classifier.parameters()

    def components(self):
        named = [("encoder", self.encoder), ("generator", self.generator),
                 ("classifier", self.classifier), ("discriminator", self.discriminator)]
        if self.target is not None:
            named.append(("target", self.target))
        return named

    def train(self, mode: bool = True) -> "ModelBundle":
        for _, module in self.components():
            module.train(mode)
        return self


@dataclass
class LatentCode:
    """Encoder posterior plus the reparameterised sample and the noise that produced it"""

    mean: torch.Tensor
    log_variance: torch.Tensor
    sample: torch.Tensor
    noise: torch.Tensor


def initialize_parameters(module: nn.Module, rng: Rng) -> nn.Module:
    """Fan-in uniform initialisation (PyTorch's default bounds) from a seeded stream"""
    generator = rng.torch
    with torch.no_grad():
        for layer in module.modules():
            weight = getattr(layer, "weight", None)
            if not isinstance(weight, torch.Tensor):
                continue
            bound = 1.0 / float(np.sqrt(weight[0].numel()))
            weight.uniform_(-bound, bound, generator=generator)
            bias = getattr(layer, "bias", None)
            if isinstance(bias, torch.Tensor):
                bias.uniform_(-bound, bound, generator=generator)
    return module


def build_bundle(cfg: ALConfig, image_shape: ImageShape, num_classes: int, rng: Rng,
                 dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Fresh encoder, generator, proxy classifier and discriminator"""
    bundle = ModelBundle(
        encoder=Encoder(image_shape, cfg.latent_dim, cfg.conv_width),
        generator=Generator(image_shape, cfg.latent_dim, cfg.conv_width),
        classifier=ProxyClassifier(cfg.latent_dim, cfg.mlp_width, num_classes),
        discriminator=Discriminator(cfg.latent_dim, cfg.disc_width),
    )
    for name, module in bundle.components():
        initialize_parameters(module, rng.child(name))
        module.to(dtype)
    return bundle


def build_target(cfg: ALConfig, image_shape: ImageShape, num_classes: int, rng: Rng,
                 dtype: torch.dtype = torch.float32) -> TargetLearner:
    target = TargetLearner(image_shape, num_classes, cfg.target_width)
    return initialize_parameters(target, rng.child("target")).to(dtype)


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over the float64 little-endian parameter bytes"""
    vector = parameters_to_vector(module.parameters()).detach().to(torch.float64).cpu().numpy()
    return hashlib.sha256(vector.astype("<f8").tobytes()).hexdigest()


# ========================
# Forward operations
# ========================

def encode(encoder: Encoder, x: Union[Batch, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    images = _images(x)
    _check_image_shape(images, encoder.image_shape)
    return encoder(images)


def reparameterize(mu: torch.Tensor, log_variance: torch.Tensor, rng: Rng) -> LatentCode:
    """z = mu + exp(0.5 * logvar) * eps with eps drawn from ``rng`` and recorded"""
    if mu.shape != log_variance.shape:
        raise InvalidArgumentError(f"mean {tuple(mu.shape)} and log-variance {tuple(log_variance.shape)} differ")
    log_variance = log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)
    noise = torch.randn(mu.shape, generator=rng.torch, dtype=mu.dtype)
    sample = mu + torch.exp(0.5 * log_variance) * noise
    return LatentCode(mean=mu, log_variance=log_variance, sample=sample, noise=noise)


def decode(generator: Generator, z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 2 or z.shape[1] != generator.latent_dim:
        raise InvalidArgumentError(f"latent codes must be (B, {generator.latent_dim}), got {tuple(z.shape)}")
    return generator(z)


def classify_proxy(classifier: ProxyClassifier, z: torch.Tensor, head: Head = Head.LABEL) -> torch.Tensor:
    return classifier(z, head)


def discriminate(discriminator: Discriminator, z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 2 or z.shape[1] != discriminator.latent_dim:
        raise InvalidArgumentError(f"latent codes must be (B, {discriminator.latent_dim}), got {tuple(z.shape)}")
    return discriminator(z)


def target_forward(target: TargetLearner, x: Union[Batch, torch.Tensor], head: Head = Head.LABEL) -> torch.Tensor:
    images = _images(x)
    _check_image_shape(images, target.image_shape)
    return target(images, head)


@torch.no_grad()
def encode_means(encoder: Encoder, dataset, indices: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    """Encoder means for ``dataset[indices]`` in chunks, in index order"""
    indices = np.asarray(indices, dtype=np.int64)
    dtype = next(encoder.parameters()).dtype
    chunks = [
        encode(encoder, make_batch(dataset, indices[i:i + batch_size], with_labels=False, dtype=dtype))[0]
        for i in range(0, len(indices), batch_size)
    ]
    if not chunks:
        return torch.empty((0, encoder.latent_dim), dtype=dtype)
    return torch.cat(chunks)


@torch.no_grad()
def predict_logits(target: TargetLearner, dataset, indices: np.ndarray, batch_size: int = 512,
                   head: Head = Head.LABEL) -> torch.Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    dtype = next(target.parameters()).dtype
    chunks = [
        target_forward(target, make_batch(dataset, indices[i:i + batch_size], with_labels=False, dtype=dtype), head)
        for i in range(0, len(indices), batch_size)
    ]
    return torch.cat(chunks) if chunks else torch.empty((0, 0), dtype=dtype)
