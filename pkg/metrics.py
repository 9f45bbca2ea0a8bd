"""Метрики качества сегментации деревьев: Dice, полнота центральных линий, утечки, разрывы"""

import logging
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from models import BinaryMask, CaseMetrics, MetricsReport
from skeleton import skeletonize
from volume import count_components


logger = logging.getLogger(__name__)


def _require_same(*masks: BinaryMask):
    first = masks[0]
    for m in masks[1:]:
        first.require_same_grid(m, "metric inputs")


def _centerline_length(g_cl: np.ndarray) -> int:
    length = int(g_cl.sum())
    if length == 0:
        raise ValueError("reference centerline is empty")
    return length


def dice_coeff(y: BinaryMask, g: BinaryMask) -> float:
    """2|Y & G| / (|Y| + |G|); для двух пустых масок 1.0"""
    _require_same(y, g)
    a, b = y.as_bool(), g.as_bool()
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def completeness(y: BinaryMask, g_cl: BinaryMask) -> float:
    """Доля эталонной центральной линии внутри предсказания"""
    _require_same(y, g_cl)
    cl = g_cl.as_bool()
    return int(np.logical_and(y.as_bool(), cl).sum()) / _centerline_length(cl)


def leakage(y: BinaryMask, g: BinaryMask, g_cl: BinaryMask, y_cl: Optional[BinaryMask] = None) -> float:
    """Длина центральных линий предсказания вне эталона, нормированная на длину эталонной линии"""
    _require_same(y, g, g_cl)
    length = _centerline_length(g_cl.as_bool())
    if y_cl is None:
        y_cl = skeletonize(y)
    return int(np.logical_and(y_cl.as_bool(), ~g.as_bool()).sum()) / length


def gaps(y: BinaryMask, g_cl: BinaryMask) -> int:
    """NCC(Y & G_cl) - NCC(G_cl) при 26-связности; может быть отрицательным"""
    _require_same(y, g_cl)
    cl = g_cl.as_bool()
    return count_components(np.logical_and(y.as_bool(), cl), 26) - count_components(cl, 26)


def evaluate_case(y: BinaryMask, g: BinaryMask, g_cl: BinaryMask, case_id: str = "case") -> CaseMetrics:
    """Все четыре метрики одного случая"""
    _require_same(y, g, g_cl)
    a, cl = y.as_bool(), g_cl.as_bool()
    length = _centerline_length(cl)
    if np.any(cl & ~g.as_bool()):
        logger.warning(f"{case_id}: reference centerline is not contained in the reference mask")

    detected = np.logical_and(a, cl)
    ncc_detected = count_components(detected, 26)
    y_cl = skeletonize(y).as_bool()
    result = CaseMetrics(
        case_id=case_id,
        dice=dice_coeff(y, g),
        completeness=int(detected.sum()) / length,
        leakage=int(np.logical_and(y_cl, ~g.as_bool()).sum()) / length,
        gaps=ncc_detected - count_components(cl, 26),
        ncc_detected=ncc_detected,
    )
    logger.info(f"{case_id}: dice={result.dice:.4f} completeness={result.completeness:.4f} "
                f"leakage={result.leakage:.4f} gaps={result.gaps} (ncc_detected={ncc_detected})")
    return result


def evaluate_cases(cases: Iterable[Tuple[str, BinaryMask, BinaryMask, BinaryMask]]) -> MetricsReport:
    """Отчет по набору (case_id, Y, G, G_cl)"""
    return MetricsReport([evaluate_case(y, g, g_cl, case_id) for case_id, y, g, g_cl in cases])


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Парный двусторонний t-тест Стьюдента: (t, p)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1D of equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError(f"paired t-test needs at least 2 cases, got {a.size}")
    differences = a - b
    if np.all(differences == 0):
        return 0.0, 1.0
    if np.all(differences == differences[0]):
        raise ValueError("degenerate test: all paired differences are identical")
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


def compare_reports(before: MetricsReport, after: MetricsReport) -> Dict[str, Dict[str, float]]:
    """t-тест по каждой метрике для двух отчетов по одним и тем же случаям"""
    if before.case_ids != after.case_ids:
        raise ValueError("reports cover different cases")
    comparison = {}
    for metric in MetricsReport.METRICS:
        try:
            t, p = paired_ttest(after.values(metric), before.values(metric))
        except ValueError as e:
            logger.warning(f"Skipping t-test for {metric}: {e}")
            continue
        comparison[metric] = {"t": t, "p": p}
    return comparison
