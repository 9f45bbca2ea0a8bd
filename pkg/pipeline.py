"""Конвейер уточнения разметки: базовая сеть, синтез ошибок, LASN, сеть уточнения, вывод"""

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from config import AugmentConfig, ExperimentConfig, save_config
from errorsynth import corrupt
from metrics import compare_reports, dice_coeff, evaluate_case
from models import BinaryMask, MetricsReport, RefinementMode, RefinementSample, Volume
from network import (
    DivergenceError, OptimizerState, adversarial_losses, adversarial_objective, build_model, dice_loss, forward,
    lasn_generator_loss, step_model,
)
from rng import derive_seed, make_rng, torch_generator
from skeleton import GraphError, extract_graph, skeletonize
from storage import ArtifactStore, Case
from volume import threshold


logger = logging.getLogger(__name__)

LINEAR_KEYS = ("image", "label")


def _rotation_matrix(angles_rad: Sequence[float]) -> np.ndarray:
    ax, ay, az = angles_rad
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(sample: Dict[str, np.ndarray], rng: np.random.Generator,
            flags: AugmentConfig) -> Dict[str, np.ndarray]:
    """Одно и то же пространственное преобразование для всех массивов образца.

    Изображение и входная метка интерполируются линейно, цель и маска по ближайшему соседу.
    """
    out = {k: np.asarray(v) for k, v in sample.items()}
    if flags.rotate or flags.scale:
        angles = [math.radians(rng.uniform(-flags.max_rotation_deg, flags.max_rotation_deg)) if flags.rotate else 0.0
                  for _ in range(3)]
        factor = rng.uniform(*flags.scale_range) if flags.scale else 1.0
        matrix = _rotation_matrix(angles).T / factor
        for key, arr in out.items():
            center = (np.array(arr.shape, dtype=np.float64) - 1.0) / 2.0
            offset = center - matrix @ center
            order = 1 if key in LINEAR_KEYS else 0
            out[key] = ndimage.affine_transform(arr.astype(np.float64), matrix, offset=offset,
                                                order=order, mode="nearest")
    if flags.rot90:
        k = int(rng.integers(0, 4))
        axes = [(0, 1), (0, 2), (1, 2)][int(rng.integers(0, 3))]
        shapes = {arr.shape for arr in out.values()}
        if all(s[axes[0]] == s[axes[1]] for s in shapes):
            out = {key: np.rot90(arr, k, axes) for key, arr in out.items()}
    if flags.flip:
        for axis in range(3):
            if rng.random() < 0.5:
                out = {key: np.flip(arr, axis) for key, arr in out.items()}
    return {key: np.ascontiguousarray(arr) for key, arr in out.items()}


def background_intensity(image: Volume, bounds: BinaryMask) -> float:
    """Медиана интенсивности вне ограничивающей маски"""
    outside = image.data[~bounds.as_bool()]
    return float(np.median(outside)) if outside.size else float(image.data.min())


def _pad_to(arr: np.ndarray, patch: int, value: float) -> np.ndarray:
    pad = [(0, max(0, patch - n)) for n in arr.shape]
    if not any(p for _, p in pad):
        return arr
    return np.pad(arr, pad, mode="constant", constant_values=value)


def extract_patches(arrays: Dict[str, np.ndarray], patch_size: int, rng: np.random.Generator, n: int,
                    pad_values: Optional[Dict[str, float]] = None) -> List[Dict[str, np.ndarray]]:
    """n случайных патчей с равномерными смещениями; меньшие объемы дополняются"""
    pad_values = pad_values or {}
    shapes = {arr.shape for arr in arrays.values()}
    if len(shapes) != 1:
        raise ValueError(f"arrays of one sample must share dims, got {sorted(shapes)}")
    padded = {k: _pad_to(np.asarray(v), patch_size, pad_values.get(k, 0.0)) for k, v in arrays.items()}
    dims = next(iter(padded.values())).shape
    patches = []
    for _ in range(n):
        offset = [int(rng.integers(0, d - patch_size + 1)) for d in dims]
        window = tuple(slice(o, o + patch_size) for o in offset)
        patches.append({k: v[window] for k, v in padded.items()})
    return patches


def window_starts(n: int, patch: int, overlap: float) -> List[int]:
    """Начала окон по одной оси; последнее окно прижато к границе"""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if n <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def window_counts(dims: Sequence[int], patch: int, overlap: float) -> np.ndarray:
    """Сколько окон покрывает каждый воксель"""
    counts = np.zeros(tuple(max(n, patch) for n in dims), dtype=np.int64)
    grids = [window_starts(max(n, patch), patch, overlap) for n in dims]
    for x in grids[0]:
        for y in grids[1]:
            for z in grids[2]:
                counts[x:x + patch, y:y + patch, z:z + patch] += 1
    return counts[tuple(slice(0, n) for n in dims)]


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def sliding_window_infer(model: nn.Module, channels: np.ndarray, patch: int, overlap: float = 0.5) -> Volume:
    """Вывод окнами с перекрытием; значение вокселя = среднее по всем покрывающим окнам"""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim == 3:
        channels = channels[None]
    dims = channels.shape[1:]
    pad = [(0, 0)] + [(0, max(0, patch - n)) for n in dims]
    padded = np.pad(channels, pad, mode="edge")
    full = padded.shape[1:]
    total = np.zeros(full, dtype=np.float64)
    count = np.zeros(full, dtype=np.int64)
    grids = [window_starts(n, patch, overlap) for n in full]

    model.eval()
    dtype = _model_dtype(model)
    with torch.no_grad():
        for x in grids[0]:
            for y in grids[1]:
                for z in grids[2]:
                    window = (slice(x, x + patch), slice(y, y + patch), slice(z, z + patch))
                    tensor = torch.from_numpy(np.ascontiguousarray(padded[(slice(None),) + window])).to(dtype)
                    output, _ = forward(model, tensor.unsqueeze(0))
                    total[window] += output[0, 0].double().numpy()
                    count[window] += 1
    mean = total / count
    return Volume(mean[tuple(slice(0, n) for n in dims)])


def postprocess(y: Volume, t: float, bounds: Optional[BinaryMask]) -> BinaryMask:
    """Порог и удаление всего вне ограничивающей маски"""
    x = threshold(y, t)
    if bounds is None:
        return x
    return x.like(x.as_bool() & bounds.as_bool())


@dataclass
class TrainingHistory:
    """Потери по шагам и выбранный лучший шаг"""
    stage: str
    losses: List[float] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)
    best_step: Optional[int] = None
    best_score: Optional[float] = None
    source_counts: Dict[str, int] = field(default_factory=dict)


def _to_batch(patches: List[Dict[str, np.ndarray]], keys: Sequence[str], dtype=torch.float32) -> torch.Tensor:
    stacked = np.stack([np.stack([p[k] for k in keys]) for p in patches])
    return torch.from_numpy(stacked.astype(np.float32)).to(dtype)


def _check_finite(stage: str, step: int, **losses: torch.Tensor):
    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise DivergenceError(f"{stage}: non-finite {name} at step {step}")


def _log_step(stage: str, step: int, every: int, store: Optional[ArtifactStore], **values: float):
    if store is not None:
        store.log_event(stage, step, **values)
    if step % every == 0:
        text = " ".join(f"{k}={v:.5f}" for k, v in values.items())
        logger.info(f"[{stage}] step {step}: {text}")


def _fit_segmenter(stage: str, model: nn.Module, draw: Callable[[], List[Dict[str, np.ndarray]]],
                   input_keys: Sequence[str], steps: int, config: ExperimentConfig,
                   store: Optional[ArtifactStore],
                   validate: Optional[Callable[[nn.Module], float]] = None) -> TrainingHistory:
    """Минимизация маскированной Dice-потери Adam'ом; сохраняется лучшая по валидации модель"""
    state = OptimizerState.for_model(model, config.lr)
    history = TrainingHistory(stage)
    best_state = copy.deepcopy(model.state_dict()) if validate is not None else None
    for step in range(steps):
        patches = draw()
        inputs = _to_batch(patches, input_keys)
        target = _to_batch(patches, ["target"])
        bounds = _to_batch(patches, ["bounds"])
        model.train()
        output, _ = forward(model, inputs)
        loss = dice_loss(output, target, bounds)
        _check_finite(stage, step, loss=loss)
        loss.backward()
        step_model(model, state)
        history.losses.append(float(loss.item()))
        _log_step(stage, step, config.log_every, store, loss=float(loss.item()))

        if validate is not None and ((step + 1) % config.validate_every == 0 or step + 1 == steps):
            score = validate(model)
            history.validation.append((step, score))
            logger.info(f"[{stage}] step {step}: validation dice {score:.4f}")
            if history.best_score is None or score > history.best_score:
                history.best_score, history.best_step = score, step
                best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def _case_arrays(case: Case) -> Dict[str, np.ndarray]:
    if case.gt is None:
        raise ValueError(f"case {case.case_id} has no ground truth")
    return {"image": case.image.data, "target": case.gt.data.astype(np.float64),
            "bounds": case.bounds.data.astype(np.float64)}


def train_base(config: ExperimentConfig, train_cases: List[Case], val_cases: List[Case],
               store: Optional[ArtifactStore] = None) -> Tuple[nn.Module, TrainingHistory]:
    """Базовая сеть f1: изображение -> вероятность принадлежности структуре"""
    if not train_cases:
        raise ValueError("no labeled training cases")
    model = build_model(config.model.spec("unet", 1), torch_generator(config.seed, "base", "init"))
    rng = make_rng(config.seed, "base", "patches")
    sources = [(_case_arrays(c), {"image": background_intensity(c.image, c.bounds)}) for c in train_cases]

    def draw():
        patches = []
        for _ in range(config.batch_size):
            arrays, pads = sources[int(rng.integers(0, len(sources)))]
            patch = extract_patches(arrays, config.patch_size, rng, 1, pads)[0]
            patches.append(augment(patch, rng, config.augment))
        return patches

    def validate(model):
        scores = [dice_coeff(postprocess(sliding_window_infer(model, c.image.data, config.patch_size, config.overlap),
                                         config.threshold, c.bounds), c.gt)
                  for c in val_cases]
        return float(np.mean(scores))

    logger.info(f"Training base network on {len(train_cases)} cases for {config.base_steps} steps")
    history = _fit_segmenter("base", model, draw, ["image"], config.base_steps, config, store,
                             validate if val_cases else None)
    return model, history


def predict_initial(f1: nn.Module, cases: List[Case], config: ExperimentConfig) -> Dict[str, Tuple[Volume, BinaryMask]]:
    """y1 окнами и x1 = порог(y1) внутри ограничивающей маски"""
    result = {}
    for case in cases:
        y1 = sliding_window_infer(f1, case.image.data, config.patch_size, config.overlap)
        result[case.case_id] = (y1, postprocess(y1, config.threshold, case.bounds))
    return result


def synthesize_errors(config: ExperimentConfig, cases: List[Case], labels: Optional[Dict[str, BinaryMask]] = None,
                      store: Optional[ArtifactStore] = None, tag: str = "syn",
                      params=None) -> Dict[str, List[BinaryMask]]:
    """syn_per_case синтетических меток x_syn на случай; записи сохраняются в records/"""
    params = params if params is not None else config.error_params
    result = {}
    for case in cases:
        label = labels[case.case_id] if labels is not None else case.gt
        graph, centerline = case.graph, case.centerline
        if labels is not None or graph is None:
            skel = skeletonize(label)
            graph = extract_graph(label, case.root_hint, skel=skel)
            centerline = skel
        outputs = []
        for k in range(config.syn_per_case):
            rng = make_rng(config.seed, tag, case.case_id, k)
            x_syn, record = corrupt(label, graph, params, rng, centerline=centerline,
                                    seed=derive_seed(config.seed, tag, case.case_id, k))
            if store is not None:
                store.save_record(record, f"{case.case_id}_{tag}{k}")
            outputs.append(x_syn)
        result[case.case_id] = outputs
    logger.info(f"Synthesized {config.syn_per_case} corrupted labels for each of {len(cases)} cases ({tag})")
    return result


def train_lasn(x_syn: List[BinaryMask], x1: List[BinaryMask], config: ExperimentConfig,
               store: Optional[ArtifactStore] = None) -> Tuple[nn.Module, nn.Module, TrainingHistory]:
    """Поочередное обучение дискриминатора D и сети f_a, придающей x_syn вид x1"""
    if not x_syn or not x1:
        raise ValueError("LASN training needs both synthetic and initial labels")
    f_a = build_model(config.model.spec("unet", 1), torch_generator(config.seed, "lasn", "init"))
    disc = build_model(config.discriminator.spec("discriminator", 1), torch_generator(config.seed, "disc", "init"),
                       zero_head=True)
    state_a = OptimizerState.for_model(f_a, config.lr)
    state_d = OptimizerState.for_model(disc, config.lr)
    rng = make_rng(config.seed, "lasn", "patches")
    history = TrainingHistory("lasn")

    def draw(volumes: List[BinaryMask]) -> torch.Tensor:
        patches = []
        for _ in range(config.batch_size):
            arrays = {"target": volumes[int(rng.integers(0, len(volumes)))].data.astype(np.float64)}
            patch = extract_patches(arrays, config.patch_size, rng, 1)[0]
            patches.append(augment(patch, rng, replace(config.augment, rotate=False, scale=False)))
        return _to_batch(patches, ["target"])

    logger.info(f"Training LASN on {len(x_syn)} synthetic and {len(x1)} initial labels "
                f"for {config.lasn_steps} steps (lambda={config.lam})")
    for step in range(config.lasn_steps):
        real = draw(x1)
        synthetic = draw(x_syn)

        f_a.train()
        disc.train()
        with torch.no_grad():
            x_a, _ = forward(f_a, synthetic)
        d_real, _ = forward(disc, real)
        d_fake, _ = forward(disc, x_a)
        loss_d, _ = adversarial_losses(d_real, d_fake, config.saturating)
        l_adv = adversarial_objective(d_real.detach(), d_fake.detach())
        _check_finite("lasn", step, loss_d=loss_d)
        loss_d.backward()
        step_model(disc, state_d)

        x_a, _ = forward(f_a, synthetic)
        d_fake, _ = forward(disc, x_a)
        loss_g = lasn_generator_loss(d_fake, x_a, synthetic, config.lam, config.saturating)
        _check_finite("lasn", step, loss_g=loss_g)
        loss_g.backward()
        step_model(f_a, state_a)
        disc.zero_grad(set_to_none=True)

        history.losses.append(float(loss_g.item()))
        _log_step("lasn", step, config.log_every, store, loss_d=float(loss_d.item()),
                  loss_g=float(loss_g.item()), l_adv=float(l_adv.item()))
    return f_a, disc, history


def apply_lasn(f_a: nn.Module, x_syn: BinaryMask, config: ExperimentConfig) -> Volume:
    """x_a = f_a(x_syn): мягкая метка того же размера"""
    return sliding_window_infer(f_a, x_syn.data, config.patch_size, config.overlap)


@dataclass
class RefinerInputs:
    """Метки для сети уточнения одного случая: x1 и альтернативные источники"""
    case: Case
    x1: BinaryMask
    alternatives: List[np.ndarray] = field(default_factory=list)
    alt_source: str = "x_a"


def refinement_sample(patch: Dict[str, np.ndarray], source: str) -> RefinementSample:
    return RefinementSample(image=patch["image"], label=patch["label"], target=patch["target"],
                            bounds=patch["bounds"], source=source)


def train_refiner(config: ExperimentConfig, inputs: List[RefinerInputs], val_inputs: List[RefinerInputs],
                  store: Optional[ArtifactStore] = None) -> Tuple[nn.Module, TrainingHistory]:
    """Сеть f2(I, x~) -> g; x~ из x1 или из альтернативного источника с вероятностью mix_ratio"""
    if not inputs:
        raise ValueError("no training cases for the refinement network")
    for item in inputs:
        if item.x1 is None:
            raise ValueError(f"case {item.case.case_id} has no initial segmentation")
    model = build_model(config.model.spec("unet", 2), torch_generator(config.seed, "refiner", "init"))
    rng = make_rng(config.seed, "refiner", "patches")
    base = [(_case_arrays(item.case), {"image": background_intensity(item.case.image, item.case.bounds)})
            for item in inputs]
    counts: Dict[str, int] = {"x1": 0}

    def draw():
        patches = []
        for _ in range(config.batch_size):
            index = int(rng.integers(0, len(inputs)))
            item = inputs[index]
            arrays, pads = base[index]
            use_alt = rng.random() < config.mix_ratio and bool(item.alternatives)
            if use_alt:
                label = item.alternatives[int(rng.integers(0, len(item.alternatives)))]
                source = item.alt_source
            else:
                label = item.x1.data.astype(np.float64)
                source = "x1"
            counts[source] = counts.get(source, 0) + 1
            patch = extract_patches({**arrays, "label": np.asarray(label, dtype=np.float64)},
                                    config.patch_size, rng, 1, pads)[0]
            sample = refinement_sample(augment(patch, rng, config.augment), source)
            patches.append({"image": sample.image, "label": sample.label, "target": sample.target,
                            "bounds": sample.bounds})
        return patches

    def validate(model):
        scores = []
        for item in val_inputs:
            _, x2 = refine(model, item.case.image, item.x1, config, item.case.bounds)
            scores.append(dice_coeff(x2, item.case.gt))
        return float(np.mean(scores))

    logger.info(f"Training refinement network on {len(inputs)} cases for {config.refiner_steps} steps "
                f"(mode={config.mode}, mix={config.mix_ratio})")
    history = _fit_segmenter("refiner", model, draw, ["image", "label"], config.refiner_steps, config, store,
                             validate if val_inputs else None)
    history.source_counts = dict(counts)
    total = sum(counts.values())
    if total:
        logger.info(f"Refiner label sources: {counts} (x1 fraction {counts['x1'] / total:.3f})")
    return model, history


def refine(f2: nn.Module, image: Volume, x1: BinaryMask, config: ExperimentConfig,
           bounds: Optional[BinaryMask] = None) -> Tuple[Volume, BinaryMask]:
    """y2 = f2(I, x1) окнами; x2 = порог(y2) внутри маски"""
    image.require_same_grid(x1, "image and initial label")
    channels = np.stack([image.data, x1.data.astype(np.float64)])
    y2 = sliding_window_infer(f2, channels, config.patch_size, config.overlap)
    return y2, postprocess(y2, config.threshold, bounds)


@dataclass
class PipelineResult:
    """Обученные сети и отчеты одного запуска"""
    f1: nn.Module
    f2: nn.Module
    f_a: Optional[nn.Module]
    discriminator: Optional[nn.Module]
    report_x1: MetricsReport
    report_x2: MetricsReport
    comparison: Dict[str, Dict[str, float]]
    histories: Dict[str, TrainingHistory] = field(default_factory=dict)
    predictions: Dict[str, Tuple[BinaryMask, BinaryMask]] = field(default_factory=dict)


class RefinementPipeline:
    """Полный запуск: база -> синтез -> LASN -> уточнение -> вывод на тесте -> метрики"""

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None,
                 dataset: Optional[ArtifactStore] = None):
        self.config = config
        self.store = store if store is not None else ArtifactStore(config.out_dir)
        self.dataset = dataset if dataset is not None else ArtifactStore(config.data_dir, layout=False)
        self.logger = logging.getLogger(__name__)
        self.cases: Dict[str, Case] = {}
        save_config(config, self.store.path("config.json"))

    def load(self):
        """Загрузка всех случаев разбиений из каталога данных"""
        ids = self.config.train + self.config.val + self.config.test + self.config.unlabeled
        self.cases = {c.case_id: c for c in self.dataset.load_cases(ids)}
        self.logger.info(f"Loaded {len(self.cases)} cases from {self.dataset.root}")

    def split(self, name: str) -> List[Case]:
        return [self.cases[case_id] for case_id in getattr(self.config, name)]

    def stage_base(self) -> Tuple[nn.Module, TrainingHistory]:
        f1, history = train_base(self.config, self.split("train"), self.split("val"), self.store)
        self.store.save_checkpoint(f1, "base.ckpt", {"stage": "base", "best_step": history.best_step})
        return f1, history

    def stage_refiner_inputs(self, cases: List[Case], x1: Dict[str, BinaryMask], config: ExperimentConfig,
                             f_a: Optional[nn.Module] = None,
                             x_syn: Optional[Dict[str, List[BinaryMask]]] = None) -> List[RefinerInputs]:
        """Альтернативные метки для каждого случая согласно режиму уточнения"""
        mode = config.refinement_mode
        items = [RefinerInputs(case=c, x1=x1[c.case_id]) for c in cases]
        if mode == RefinementMode.LR:
            return items
        if mode == RefinementMode.LR_SYN_INIT:
            for item in items:
                try:
                    corrupted = synthesize_errors(config, [item.case], {item.case.case_id: item.x1},
                                                  self.store, tag="syninit")
                except GraphError as e:
                    self.logger.warning(f"Skipping synthetic errors on x1 of {item.case.case_id}: {e}")
                    continue
                item.alternatives = [m.data.astype(np.float64) for m in corrupted[item.case.case_id]]
                item.alt_source = "x_syn_init"
            return items
        for item in items:
            syn = x_syn[item.case.case_id]
            if mode == RefinementMode.LR_SYN:
                item.alternatives = [m.data.astype(np.float64) for m in syn]
                item.alt_source = "x_syn"
            else:
                item.alternatives = [apply_lasn(f_a, m, config).data for m in syn]
                item.alt_source = "x_a"
        return items

    def train_stages(self, config: ExperimentConfig, initial: Dict[str, BinaryMask],
                     tag: str = "") -> Tuple[nn.Module, Optional[nn.Module], Optional[nn.Module], TrainingHistory]:
        """Синтез, LASN и сеть уточнения поверх готовой f1"""
        train, val = self.split("train"), self.split("val")
        mode = config.refinement_mode
        x_syn, f_a, disc = None, None, None
        if mode in (RefinementMode.LR_SYN, RefinementMode.LR_SYN_LASN):
            x_syn = synthesize_errors(config, train, store=self.store, tag=f"syn{tag}")
        if mode == RefinementMode.LR_SYN_LASN:
            all_syn = [m for c in train for m in x_syn[c.case_id]]
            f_a, disc, _ = train_lasn(all_syn, [initial[c.case_id] for c in train], config, self.store)
            self.store.save_checkpoint(f_a, f"lasn{tag}.ckpt", {"stage": "lasn"})
            self.store.save_checkpoint(disc, f"discriminator{tag}.ckpt", {"stage": "lasn"})
        inputs = self.stage_refiner_inputs(train, initial, config, f_a, x_syn)
        val_inputs = [RefinerInputs(case=c, x1=initial[c.case_id]) for c in val]
        f2, history = train_refiner(config, inputs, val_inputs, self.store)
        self.store.save_checkpoint(f2, f"refiner{tag}.ckpt", {"stage": "refiner", "mode": config.mode,
                                                              "best_step": history.best_step})
        return f2, f_a, disc, history

    def evaluate(self, f2: nn.Module, initial: Dict[str, BinaryMask], config: ExperimentConfig,
                 save: bool = True) -> Tuple[MetricsReport, MetricsReport, Dict[str, Tuple[BinaryMask, BinaryMask]]]:
        """x1 и x2 на тестовом разбиении и их метрики"""
        cases_x1, cases_x2, predictions = [], [], {}
        for case in self.split("test"):
            x1 = initial[case.case_id]
            _, x2 = refine(f2, case.image, x1, config, case.bounds)
            predictions[case.case_id] = (x1, x2)
            if save:
                self.store.save_volume(x1, f"predictions/{case.case_id}_x1.mhd")
                self.store.save_volume(x2, f"predictions/{case.case_id}_x2.mhd")
            if case.gt is not None and case.centerline is not None:
                cases_x1.append(evaluate_case(x1, case.gt, case.centerline, case.case_id))
                cases_x2.append(evaluate_case(x2, case.gt, case.centerline, case.case_id))
        return MetricsReport(cases_x1), MetricsReport(cases_x2), predictions

    def run(self) -> PipelineResult:
        config = self.config
        if config.threads:
            torch.set_num_threads(config.threads)
        if not self.cases:
            self.load()
        self.logger.info(f"Pipeline started (structure={config.structure}, mode={config.mode}, seed={config.seed})")

        f1, base_history = self.stage_base()
        labeled = self.split("train") + self.split("val") + self.split("test")
        initial = {case_id: x1 for case_id, (_, x1) in predict_initial(f1, labeled, config).items()}
        f2, f_a, disc, refiner_history = self.train_stages(config, initial)

        report_x1, report_x2, predictions = self.evaluate(f2, initial, config)
        comparison = compare_reports(report_x1, report_x2) if len(report_x1.cases) >= 2 else {}
        self.store.save_json({"x1": report_x1.to_dict(), "x2": report_x2.to_dict(), "ttest": comparison},
                             "metrics.json")
        self.logger.info(f"Pipeline finished: dice x1={report_x1.aggregate['dice']['mean']:.4f} "
                         f"x2={report_x2.aggregate['dice']['mean']:.4f}")
        return PipelineResult(f1=f1, f2=f2, f_a=f_a, discriminator=disc, report_x1=report_x1,
                              report_x2=report_x2, comparison=comparison,
                              histories={"base": base_history, "refiner": refiner_history},
                              predictions=predictions)


def run_semi_supervised(pipeline: RefinementPipeline,
                        supervised: Optional[PipelineResult] = None) -> Tuple[nn.Module, MetricsReport]:
    """Псевдометки на неразмеченных случаях и повторное обучение f2 на смеси"""
    config = pipeline.config
    if supervised is None:
        supervised = pipeline.run()
    unlabeled = pipeline.split("unlabeled")
    if not unlabeled:
        logger.warning("No unlabeled cases: keeping the supervised refinement network")
        return supervised.f2, supervised.report_x2

    f1, f2 = supervised.f1, supervised.f2
    labeled = pipeline.split("train") + pipeline.split("val") + pipeline.split("test")
    initial = {case_id: x1 for case_id, (_, x1) in predict_initial(f1, labeled + unlabeled, config).items()}
    pseudo_cases = []
    for case in unlabeled:
        _, pseudo = refine(f2, case.image, initial[case.case_id], config, case.bounds)
        pseudo_cases.append(replace(case, gt=pseudo, centerline=None, graph=None))
    logger.info(f"Created {len(pseudo_cases)} pseudo labels")

    mode = config.refinement_mode
    usable, x_syn = [], {}
    for case in pseudo_cases:
        if mode in (RefinementMode.LR_SYN, RefinementMode.LR_SYN_LASN):
            try:
                x_syn.update(synthesize_errors(config, [case], store=pipeline.store, tag="synpseudo"))
            except GraphError as e:
                logger.warning(f"Skipping pseudo-labeled case {case.case_id}: {e}")
                continue
        usable.append(case)

    train = pipeline.split("train")
    if mode in (RefinementMode.LR_SYN, RefinementMode.LR_SYN_LASN):
        x_syn.update(synthesize_errors(config, train, store=pipeline.store, tag="syn"))
    inputs = pipeline.stage_refiner_inputs(train + usable, initial, config, supervised.f_a, x_syn)
    val_inputs = [RefinerInputs(case=c, x1=initial[c.case_id]) for c in pipeline.split("val")]
    semi_config = replace(config, seed=derive_seed(config.seed, "semi"))
    f2_semi, _ = train_refiner(semi_config, inputs, val_inputs, pipeline.store)
    pipeline.store.save_checkpoint(f2_semi, "refiner_semi.ckpt", {"stage": "semi"})

    _, report, _ = pipeline.evaluate(f2_semi, initial, config, save=False)
    pipeline.store.save_json({"supervised": supervised.report_x2.to_dict(), "semi": report.to_dict()},
                             "metrics_semi.json")
    return f2_semi, report


ERROR_TYPES = ("terminal", "discontinuity", "vessel")


def grid_params(config: ExperimentConfig, error_type: str, rate: float):
    """Параметры ошибок: варьируется одна доля, остальные равны 0"""
    if error_type not in ERROR_TYPES:
        raise ValueError(f"error type must be one of {ERROR_TYPES}, got {error_type!r}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"grid rate must be in [0, 1], got {rate}")
    if error_type == "vessel":
        if config.structure != "vessel":
            raise ValueError("vessel error grid requires structure='vessel'")
        return replace(config, vessel=replace(config.vessel, max_rate=rate))
    if config.structure != "airway":
        raise ValueError(f"{error_type} error grid requires structure='airway'")
    airway = replace(config.airway,
                     max_rate_terminal=rate if error_type == "terminal" else 0.0,
                     max_rate_discontinuity=rate if error_type == "discontinuity" else 0.0)
    return replace(config, airway=airway)


def gridsearch(pipeline: RefinementPipeline, error_type: str, rates: Sequence[float]) -> List[dict]:
    """Строки (rate, средний Dice, средняя полнота) по сетке максимальных долей ошибок"""
    config = pipeline.config
    for rate in rates:
        grid_params(config, error_type, rate)
    if not pipeline.cases:
        pipeline.load()
    f1, _ = pipeline.stage_base()
    labeled = pipeline.split("train") + pipeline.split("val") + pipeline.split("test")
    initial = {case_id: x1 for case_id, (_, x1) in predict_initial(f1, labeled, config).items()}

    rows = []
    for index, rate in enumerate(rates):
        point = grid_params(config, error_type, rate)
        if rate == 0.0:
            point = replace(point, mode=RefinementMode.LR.value)
        f2, _, _, _ = pipeline.train_stages(point, initial, tag=f"_grid{index}")
        _, report, _ = pipeline.evaluate(f2, initial, point, save=False)
        aggregate = report.aggregate
        rows.append({"rate": float(rate), "dice": aggregate["dice"]["mean"],
                     "completeness": aggregate["completeness"]["mean"]})
        logger.info(f"Grid {error_type} rate={rate}: dice={rows[-1]['dice']:.4f} "
                    f"completeness={rows[-1]['completeness']:.4f}")
    pipeline.store.save_json({"error_type": error_type, "rows": rows}, "gridsearch.json")
    return rows

