"""Командная строка: разбор аргументов и запуск операций"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from config import ExperimentConfig, build, load_config
from errorsynth import corrupt, record_to_dict
from metrics import evaluate_cases
from models import AirwayErrorParams, CommandResult, VesselErrorParams, Volume
from network import load_checkpoint
from phantom import generate_dataset
from pipeline import (
    RefinementPipeline, apply_lasn, gridsearch, postprocess, predict_initial, run_semi_supervised,
    sliding_window_infer, synthesize_errors, train_lasn,
)
from rng import make_rng
from skeleton import extract_graph, graph_from_dict, graph_to_dict, skeletonize
from storage import ArtifactStore, Case, find_mask, phantom_spec_from_dict
from volume import read_mask, read_mhd, write_mhd


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

VESSEL_KEYS = {"max_rate", "long", "medium", "short"}


class UsageError(Exception):
    """Неверная команда или флаги"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _voxel(text: str):
    values = [int(v) for v in text.split(",")]
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(values)


def _rates(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated rates, got {text!r}")


def load_error_params(path) -> object:
    """Параметры ошибок из JSON: сосудистые, если есть max_rate или таблицы групп"""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if not isinstance(payload, dict):
        raise ValueError("error parameters must be a JSON object")
    cls = VesselErrorParams if VESSEL_KEYS & set(payload) else AirwayErrorParams
    return build(cls, payload)


class TreeLabCli:
    """Команды treelab"""

    def __init__(self, stderr=None):
        self.stderr = stderr if stderr is not None else sys.stderr
        self.logger = logging.getLogger(__name__)
        self.handlers: Dict[str, Callable[[argparse.Namespace], CommandResult]] = {}
        self.parser = _Parser(prog="treelab", description="Уточнение разметки древовидных структур")
        self.subparsers = self.parser.add_subparsers(dest="command", parser_class=_Parser)
        self.common = _Parser(add_help=False)
        self.common.add_argument("--config", help="JSON-конфигурация эксперимента")
        self.common.add_argument("--seed", type=int, help="мастер-зерно")
        self.common.add_argument("--threads", type=int, help="число потоков torch")
        self.common.add_argument("--fidelity", action="store_true", help="полноразмерные параметры сети")
        self._setup_handlers()

    def _command(self, name: str, handler, help_text: str) -> argparse.ArgumentParser:
        self.handlers[name] = handler
        return self.subparsers.add_parser(name, help=help_text, parents=[self.common])

    def _setup_handlers(self):
        """Регистрация команд и их флагов"""
        p = self._command("phantom", self.phantom_command, "синтетический набор деревьев")
        p.add_argument("--spec", required=True)
        p.add_argument("--n", type=int, required=True)
        p.add_argument("--out")

        p = self._command("corrupt", self.corrupt_command, "синтетические ошибки в метке")
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--graph", required=True)
        p.add_argument("--params")
        p.add_argument("--out", required=True)
        p.add_argument("--record", required=True)
        p.add_argument("--centerline")

        p = self._command("skeletonize", self.skeletonize_command, "центральные линии и граф ветвей")
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--graph")
        p.add_argument("--root", type=_voxel)

        for name, handler, help_text in (
            ("train-base", self.train_base_command, "обучение базовой сети"),
            ("train-lasn", self.train_lasn_command, "обучение LASN"),
            ("train-refine", self.train_refine_command, "обучение сети уточнения"),
            ("pipeline", self.pipeline_command, "полный конвейер"),
            ("semi", self.semi_command, "полуавтоматическое обучение с псевдометками"),
        ):
            p = self._command(name, handler, help_text)
            p.add_argument("--out")

        p = self._command("infer", self.infer_command, "вывод обученной сети окнами")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--label")
        p.add_argument("--bounds")
        p.add_argument("--out", required=True)
        p.add_argument("--mask-out")
        p.add_argument("--patch", type=int, default=32)
        p.add_argument("--overlap", type=float, default=0.5)
        p.add_argument("--threshold", type=float, default=0.5)

        p = self._command("evaluate", self.evaluate_command, "метрики по каталогам масок")
        p.add_argument("--pred", required=True)
        p.add_argument("--gt", required=True)
        p.add_argument("--centerlines", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--suffix", default="")

        p = self._command("gridsearch", self.gridsearch_command, "сетка максимальных долей ошибок")
        p.add_argument("--rates", type=_rates, default=[0.0, 0.25, 0.5, 0.75, 1.0])
        p.add_argument("--error-type", choices=["terminal", "discontinuity", "vessel"], required=True)
        p.add_argument("--out")

    def dispatch(self, argv: Optional[Sequence[str]]) -> CommandResult:
        """Разбор argv и выполнение команды с отображением ошибок в коды выхода"""
        try:
            args = self.parser.parse_args(argv)
            if args.command is None:
                raise UsageError(self.parser.format_usage() + "treelab: error: a command is required")
        except UsageError as e:
            return self._fail(EXIT_USAGE, str(e))
        except SystemExit as e:
            return CommandResult(int(e.code or 0))

        if args.threads:
            torch.set_num_threads(args.threads)
        self.logger.info(f"Running command {args.command}")
        try:
            return self.handlers[args.command](args)
        except UsageError as e:
            return self._fail(EXIT_USAGE, str(e))
        except ArithmeticError as e:
            self.logger.error(f"Numerical failure in {args.command}: {e}")
            return self._fail(EXIT_NUMERIC, f"numerical failure: {e}")
        except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
            self.logger.error(f"Data error in {args.command}: {e}")
            return self._fail(EXIT_DATA, f"error: {e}")

    def _fail(self, code: int, message: str) -> CommandResult:
        print(message, file=self.stderr)
        return CommandResult(code, message)

    def _config(self, args) -> ExperimentConfig:
        if not args.config:
            raise UsageError(f"treelab {args.command}: error: --config is required")
        config = load_config(args.config, seed=args.seed, fidelity=args.fidelity)
        if getattr(args, "out", None):
            config = replace(config, out_dir=args.out)
        return config

    def _optional_config(self, args) -> Optional[ExperimentConfig]:
        return load_config(args.config, seed=args.seed, fidelity=args.fidelity) if args.config else None

    def phantom_command(self, args) -> CommandResult:
        """Генерация набора фантомов с manifest.json; --config задает каталог, зерно и стиль"""
        config = self._optional_config(args)
        with open(args.spec, "r", encoding="utf-8") as f:
            payload = json.load(f)
        if not isinstance(payload, dict):
            raise ValueError("phantom spec must be a JSON object")
        if config is not None:
            payload.setdefault("style", config.structure)
        spec = phantom_spec_from_dict(payload)
        out = args.out or (config.data_dir if config is not None else None)
        if out is None:
            raise UsageError("treelab phantom: error: --out or --config is required")
        seed = config.seed if config is not None else args.seed
        store = ArtifactStore(out, layout=False)
        cases, paths = [], []
        for case_id, case_spec, sample in generate_dataset(spec, args.n, seed):
            case = Case(case_id=case_id, image=sample.image, bounds=sample.bounding_mask, gt=sample.gt_mask,
                        centerline=sample.gt_centerline, graph=sample.graph, root_hint=sample.root_hint,
                        seed=case_spec.seed)
            paths.extend(str(p) for p in store.write_case(case))
            cases.append(case)
        paths.append(str(store.write_manifest(cases, spec)))
        return CommandResult(EXIT_OK, f"✅ Создано случаев: {len(cases)} в {out}", paths)

    def corrupt_command(self, args) -> CommandResult:
        """Синтетические ошибки в одной метке; без --params берутся параметры из --config"""
        config = self._optional_config(args)
        if args.params:
            params = load_error_params(args.params)
        elif config is not None:
            params = config.error_params
        else:
            raise UsageError("treelab corrupt: error: --params or --config is required")
        label = read_mask(args.input)
        with open(args.graph, "r", encoding="utf-8") as f:
            graph = graph_from_dict(json.load(f))
        centerline = read_mask(args.centerline) if args.centerline else None
        seed = config.seed if config is not None else (args.seed if args.seed is not None else 0)
        x_syn, record = corrupt(label, graph, params, make_rng(seed, "corrupt"), centerline=centerline, seed=seed)
        out, _ = write_mhd(x_syn, args.out)
        Path(args.record).write_text(json.dumps(record_to_dict(record), indent=2, sort_keys=True), encoding="utf-8")
        removed = sum(record.removed_counts.values())
        return CommandResult(EXIT_OK, f"✅ Удалено вокселей: {removed}", [str(out), args.record])

    def skeletonize_command(self, args) -> CommandResult:
        """Скелет маски и, по запросу, граф ветвей с поколениями и диаметрами"""
        mask = read_mask(args.input)
        skel = skeletonize(mask)
        out, _ = write_mhd(skel, args.out)
        paths = [str(out)]
        if args.graph:
            graph = extract_graph(mask, args.root, skel=skel)
            Path(args.graph).write_text(json.dumps(graph_to_dict(graph), indent=2), encoding="utf-8")
            paths.append(args.graph)
        return CommandResult(EXIT_OK, f"✅ Скелет: {skel.count} вокселей", paths)

    def _base(self, pipeline: RefinementPipeline):
        """Базовая сеть из checkpoints/base.ckpt или обучение с нуля"""
        if pipeline.store.path("checkpoints", "base.ckpt").exists():
            self.logger.info("Reusing base checkpoint")
            model, _ = pipeline.store.load_checkpoint("base.ckpt")
            return model
        model, _ = pipeline.stage_base()
        return model

    def train_base_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        pipeline.load()
        _, history = pipeline.stage_base()
        path = pipeline.store.path("checkpoints", "base.ckpt")
        return CommandResult(EXIT_OK, f"✅ Базовая сеть обучена (лучший шаг {history.best_step})", [str(path)])

    def train_lasn_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        pipeline.load()
        config = pipeline.config
        f1 = self._base(pipeline)
        train = pipeline.split("train")
        initial = predict_initial(f1, train, config)
        x_syn = synthesize_errors(config, train, store=pipeline.store)
        f_a, disc, _ = train_lasn([m for c in train for m in x_syn[c.case_id]],
                                  [initial[c.case_id][1] for c in train], config, pipeline.store)
        paths = [str(pipeline.store.save_checkpoint(f_a, "lasn.ckpt", {"stage": "lasn"})),
                 str(pipeline.store.save_checkpoint(disc, "discriminator.ckpt", {"stage": "lasn"}))]
        for c in train:
            x_a = apply_lasn(f_a, x_syn[c.case_id][0], config)
            paths.append(str(pipeline.store.save_volume(x_a, f"predictions/{c.case_id}_x_a.mhd")))
        return CommandResult(EXIT_OK, "✅ LASN обучена", paths)

    def train_refine_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        pipeline.load()
        config = pipeline.config
        f1 = self._base(pipeline)
        labeled = pipeline.split("train") + pipeline.split("val")
        initial = {k: x1 for k, (_, x1) in predict_initial(f1, labeled, config).items()}
        _, _, _, history = pipeline.train_stages(config, initial)
        path = pipeline.store.path("checkpoints", "refiner.ckpt")
        return CommandResult(EXIT_OK, f"✅ Сеть уточнения обучена (источники {history.source_counts})", [str(path)])

    def pipeline_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        result = pipeline.run()
        dice_x1 = result.report_x1.aggregate["dice"]["mean"]
        dice_x2 = result.report_x2.aggregate["dice"]["mean"]
        return CommandResult(EXIT_OK, f"✅ Dice x1={dice_x1:.4f} -> x2={dice_x2:.4f}",
                             [str(pipeline.store.path("metrics.json"))])

    def semi_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        _, report = run_semi_supervised(pipeline)
        return CommandResult(EXIT_OK, f"✅ Dice с псевдометками: {report.aggregate['dice']['mean']:.4f}",
                             [str(pipeline.store.path("checkpoints", "refiner_semi.ckpt"))])

    def gridsearch_command(self, args) -> CommandResult:
        pipeline = RefinementPipeline(self._config(args))
        rows = gridsearch(pipeline, args.error_type, args.rates)
        return CommandResult(EXIT_OK, f"✅ Точек сетки: {len(rows)}", [str(pipeline.store.path("gridsearch.json"))])

    def infer_command(self, args) -> CommandResult:
        """Вывод сети из контрольной точки на одном изображении"""
        model, _ = load_checkpoint(args.checkpoint)
        image = read_mhd(args.image)
        channels = [image.data]
        if model.spec.in_channels == 2:
            if not args.label:
                raise UsageError("treelab infer: error: --label is required for a two-channel network")
            label = read_mask(args.label)
            image.require_same_grid(label, "image and label")
            channels.append(label.data.astype(np.float64))
        y = sliding_window_infer(model, np.stack(channels), args.patch, args.overlap)
        y = Volume(y.data, image.spacing)
        out, _ = write_mhd(y, args.out)
        paths = [str(out)]
        if args.mask_out:
            bounds = read_mask(args.bounds) if args.bounds else None
            mask_path, _ = write_mhd(postprocess(y, args.threshold, bounds), args.mask_out)
            paths.append(str(mask_path))
        return CommandResult(EXIT_OK, f"✅ Вывод записан в {args.out}", paths)

    def evaluate_command(self, args) -> CommandResult:
        """Метрики для всех предсказаний каталога"""
        pred_dir = Path(args.pred)
        predictions = sorted(pred_dir.glob(f"*{args.suffix}.mhd"))
        if not predictions:
            raise ValueError(f"no predictions matching *{args.suffix}.mhd in {pred_dir}")
        cases = []
        for path in predictions:
            case_id = path.stem[:len(path.stem) - len(args.suffix)] if args.suffix else path.stem
            cases.append((case_id, read_mask(path), read_mask(find_mask(args.gt, case_id, "gt")),
                          read_mask(find_mask(args.centerlines, case_id, "centerline"))))
        report = evaluate_cases(cases)
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return CommandResult(EXIT_OK, f"✅ Оценено случаев: {len(cases)}, Dice {report.aggregate['dice']['mean']:.4f}",
                             [args.out])


def dispatch(argv: Optional[Sequence[str]]) -> CommandResult:
    return TreeLabCli().dispatch(argv)
