"""Сверточные сети (U-Net, дискриминатор), функции потерь, шаг Adam и контрольные точки"""

import hashlib
import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from models import ModelSpec


logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
ADV_EPS = 1e-7
CHECKPOINT_MAGIC = b"TREELAB\x01"


class DivergenceError(ArithmeticError):
    """Нечисловое значение потерь или градиента во время обучения"""


class ChannelAffine(nn.Module):
    """Поканальное масштабирование и сдвиг (без статистик нормализации)"""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = (1, -1, 1, 1, 1)
        return x * self.weight.view(shape) + self.bias.view(shape)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "affine":
        return ChannelAffine(channels)
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.Identity()


class ConvBlock(nn.Sequential):
    """conv3x3x3 -> norm -> leaky ReLU, повторенные convs раз"""

    def __init__(self, in_channels: int, out_channels: int, norm: str, convs: int):
        layers = []
        for i in range(convs):
            layers.append(nn.Conv3d(in_channels if i == 0 else out_channels, out_channels, 3, padding=1))
            layers.append(_norm(norm, out_channels))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        super().__init__(*layers)


class UNet(nn.Module):
    """3D U-Net с пропускающими соединениями; возвращает логиты"""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        channels = [spec.base_channels * 2 ** i for i in range(spec.levels)]
        self.encoders = nn.ModuleList(
            ConvBlock(spec.in_channels if i == 0 else channels[i - 1], channels[i], spec.norm, spec.convs_per_level)
            for i in range(spec.levels)
        )
        self.decoders = nn.ModuleList(
            ConvBlock(channels[i + 1] + channels[i], channels[i], spec.norm, spec.convs_per_level)
            for i in reversed(range(spec.levels - 1))
        )
        self.pool = nn.MaxPool3d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.head = nn.Conv3d(channels[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, encoder in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = encoder(x)
            skips.append(x)
        skips.pop()
        for decoder in self.decoders:
            x = torch.cat([self.up(x), skips.pop()], dim=1)
            x = decoder(x)
        return self.head(x)


class Discriminator(nn.Module):
    """Кодировщик + conv1x1x1 + глобальное среднее: один логит на образец"""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        channels = [spec.base_channels * 2 ** i for i in range(spec.levels)]
        self.encoders = nn.ModuleList(
            ConvBlock(spec.in_channels if i == 0 else channels[i - 1], channels[i], spec.norm, spec.convs_per_level)
            for i in range(spec.levels)
        )
        self.pool = nn.MaxPool3d(2, ceil_mode=True)
        self.head = nn.Conv3d(channels[-1], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, encoder in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = encoder(x)
        return self.head(x).mean(dim=(2, 3, 4))


class LinearModel(nn.Module):
    """Одна свертка 3x3x3"""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv3d(spec.in_channels, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


MODEL_CLASSES = {"unet": UNet, "discriminator": Discriminator, "linear": LinearModel}


def init_parameters(model: nn.Module, generator: torch.Generator, zero_head: bool = True):
    """He-инициализация по fan-in из закрепленного генератора; смещения нулевые.

    При zero_head последняя свертка обнуляется, и необученная сеть выдает ровно 0.5.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv3d):
                fan_in = module.in_channels * math.prod(module.kernel_size)
                std = math.sqrt(2.0 / fan_in)
                weight = torch.randn(module.weight.shape, generator=generator, dtype=torch.float64) * std
                module.weight.copy_(weight.to(module.weight.dtype))
                module.bias.zero_()
        if zero_head and model.spec.kind != "linear":
            model.head.weight.zero_()
            model.head.bias.zero_()


def build_model(spec: ModelSpec, generator: Optional[torch.Generator] = None, zero_head: bool = True) -> nn.Module:
    """Создает сеть по описанию; с generator параметры инициализируются детерминированно"""
    model = MODEL_CLASSES[spec.kind](spec)
    if generator is not None:
        init_parameters(model, generator, zero_head)
    return model


def forward(model: nn.Module, x: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Вероятности (после сигмоиды) и кэш промежуточных значений"""
    spec: ModelSpec = model.spec
    if x.dim() == 4:
        x = x.unsqueeze(0)
    if x.dim() != 5 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected input (N, {spec.in_channels}, nx, ny, nz), got {tuple(x.shape)}")
    if any(n % spec.divisor for n in x.shape[2:]):
        raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {spec.divisor}")
    logits = model(x)
    return torch.sigmoid(logits), {"input": x, "logits": logits}


def _masked(y, g, mask):
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs g {tuple(g.shape)}")
    if mask is None:
        return y, g
    mask = torch.as_tensor(mask, dtype=y.dtype)
    if mask.shape != y.shape:
        mask = mask.reshape(y.shape)
    return y * mask, g * mask


def dice_loss(y: torch.Tensor, g: torch.Tensor, mask=None) -> torch.Tensor:
    """-2 sum(yg) / (sum(y) + sum(g)); 0 при пустых y и g"""
    g = torch.as_tensor(g, dtype=y.dtype)
    y, g = _masked(y, g, mask)
    denominator = y.sum() + g.sum()
    if denominator.item() == 0:
        return y.sum() * 0.0
    return -2.0 * (y * g).sum() / denominator


def dice_loss_backward(y: torch.Tensor, g: torch.Tensor, mask=None) -> torch.Tensor:
    """Аналитический градиент dice_loss по y"""
    y = y.detach()
    g = torch.as_tensor(g, dtype=y.dtype)
    m = torch.ones_like(y) if mask is None else torch.as_tensor(mask, dtype=y.dtype).reshape(y.shape)
    ym, gm = _masked(y, g, m)
    denominator = ym.sum() + gm.sum()
    if denominator.item() == 0:
        raise ValueError("dice gradient undefined: sum(y) + sum(g) = 0")
    overlap = (ym * gm).sum()
    return -(2.0 * gm * denominator - 2.0 * overlap) / denominator ** 2 * m


def adversarial_objective(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean(log D(x1)) + mean(log(1 - D(x_a)))"""
    d_real = d_real.clamp(ADV_EPS, 1.0 - ADV_EPS)
    d_fake = d_fake.clamp(ADV_EPS, 1.0 - ADV_EPS)
    return torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean()


def _generator_adversarial(d_fake: torch.Tensor, saturating: bool) -> torch.Tensor:
    d_fake = d_fake.clamp(ADV_EPS, 1.0 - ADV_EPS)
    if saturating:
        return torch.log(1.0 - d_fake).mean()
    return -torch.log(d_fake).mean()


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor,
                       saturating: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """(потеря дискриминатора, состязательная часть потери генератора)"""
    return -adversarial_objective(d_real, d_fake), _generator_adversarial(d_fake, saturating)


def lasn_generator_loss(d_fake: torch.Tensor, x_a: torch.Tensor, x_syn: torch.Tensor, lam: float,
                        saturating: bool = False, mask=None) -> torch.Tensor:
    """Состязательная часть + lam * Dice(x_a, x_syn)"""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return _generator_adversarial(d_fake, saturating) + lam * dice_loss(x_a, x_syn, mask)


class OptimizerState:
    """Состояние Adam (моменты, счетчик шагов) поверх torch.optim.Adam"""

    def __init__(self, named_params: Dict[str, torch.Tensor], lr: float = 1e-2,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.names = list(named_params)
        self.params = [named_params[n] for n in self.names]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)

    @classmethod
    def for_model(cls, model: nn.Module, lr: float = 1e-2) -> "OptimizerState":
        return cls(dict(model.named_parameters()), lr=lr)

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """Первый и второй моменты параметра (нули до первого шага)"""
        p = self.params[self.names.index(name)]
        state = self.optimizer.state.get(p, {})
        return state.get("exp_avg", torch.zeros_like(p)), state.get("exp_avg_sq", torch.zeros_like(p))


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, Optional[torch.Tensor]],
              state: OptimizerState) -> Tuple[Dict[str, torch.Tensor], OptimizerState]:
    """Один шаг Adam с коррекцией смещения; нечисловой градиент -> DivergenceError"""
    if list(params) != state.names:
        raise ValueError("parameters do not match the optimizer state")
    for name, p in params.items():
        grad = grads.get(name)
        grad = torch.zeros_like(p) if grad is None else grad.detach()
        if grad.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(grad.shape)} does not match parameter {name} {tuple(p.shape)}")
        if not torch.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient in parameter {name}")
        p.grad = grad.clone()
    state.optimizer.step()
    state.t += 1
    return params, state


def step_model(model: nn.Module, state: OptimizerState):
    """adam_step по градиентам, накопленным в model после backward()"""
    params = dict(model.named_parameters())
    adam_step(params, {name: p.grad for name, p in params.items()}, state)
    model.zero_grad(set_to_none=True)


def grad_check(model: nn.Module, x: torch.Tensor, loss_fn: Callable[[torch.Tensor], torch.Tensor],
               h: float = 1e-4) -> float:
    """Максимальная относительная ошибка обратного распространения против центральных разностей.

    Модель переводится в float64. loss_fn получает выход forward и возвращает скаляр.
    """
    model.double()
    x = x.double()

    def evaluate() -> torch.Tensor:
        output, _ = forward(model, x)
        return loss_fn(output)

    model.zero_grad(set_to_none=True)
    evaluate().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            flat = p.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = evaluate().item()
                flat[i] = original - h
                minus = evaluate().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                a = analytic[i].item()
                error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if error > worst:
                    worst = error
    model.zero_grad(set_to_none=True)
    return worst


def parameters_to_blob(model: nn.Module) -> Tuple[list, bytes]:
    entries, chunks = [], []
    for name, p in model.named_parameters():
        values = p.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(values.shape)})
        chunks.append(values.tobytes(order="C"))
    return entries, b"".join(chunks)


def save_checkpoint(model: nn.Module, path: Union[str, os.PathLike], extra: Optional[dict] = None) -> Path:
    """Контейнер: сигнатура, длина и JSON-заголовок (spec, параметры, sha256), float32 little-endian"""
    path = Path(path)
    entries, blob = parameters_to_blob(model)
    header = {
        "spec": model.spec.to_dict(),
        "params": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        f.write(blob)
    logger.debug(f"Saved checkpoint {path} ({len(blob)} bytes of parameters)")
    return path


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[nn.Module, dict]:
    """Восстанавливает сеть; проверяет сигнатуру, контрольную сумму и формы"""
    path = Path(path)
    payload = path.read_bytes()
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"not a checkpoint file: {path}")
    offset = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", payload[offset:offset + 8])
    offset += 8
    header = json.loads(payload[offset:offset + size].decode("utf-8"))
    blob = payload[offset + size:]
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ValueError(f"checkpoint checksum mismatch: {path}")

    model = build_model(ModelSpec.from_dict(header["spec"]))
    params = dict(model.named_parameters())
    cursor = 0
    with torch.no_grad():
        for entry in header["params"]:
            p = params.get(entry["name"])
            if p is None or list(p.shape) != entry["shape"]:
                raise ValueError(f"checkpoint parameter {entry['name']} does not match the model")
            count = int(np.prod(entry["shape"], dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=cursor * 4)
            p.copy_(torch.from_numpy(values.reshape(entry["shape"]).copy()))
            cursor += count
    if cursor * 4 != len(blob):
        raise ValueError(f"checkpoint blob size mismatch: {path}")
    return model, header.get("extra", {})
