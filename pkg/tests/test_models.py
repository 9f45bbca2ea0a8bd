"""Тесты для моделей данных"""

import math
import unittest

import numpy as np

from models import (
    AirwayErrorParams, BinaryMask, Branch, CaseMetrics, CenterlineGraph, CorruptionRecord, ErrorEvent, ErrorType,
    GapTable, MetricsReport, ModelSpec, Node, NodeKind, Volume, VesselErrorParams,
)


class TestVolume(unittest.TestCase):
    """Тесты для Volume и BinaryMask"""

    def test_volume_is_read_only(self):
        """Тест неизменяемости данных объема"""
        v = Volume(np.zeros((2, 3, 4)))
        self.assertEqual(v.dims, (2, 3, 4))
        with self.assertRaises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_volume_copies_input(self):
        """Тест: объем не зависит от исходного массива"""
        raw = np.zeros((2, 2, 2))
        v = Volume(raw)
        raw[0, 0, 0] = 5.0
        self.assertEqual(v.data[0, 0, 0], 0.0)

    def test_rejects_wrong_rank(self):
        """Тест отказа для не трехмерных данных"""
        with self.assertRaises(ValueError):
            Volume(np.zeros((4, 4)))

    def test_mask_from_bool(self):
        """Тест маски из булева массива"""
        m = BinaryMask(np.array([True, False, True]).reshape(3, 1, 1))
        self.assertEqual(m.data.dtype, np.uint8)
        self.assertEqual(m.count, 2)
        self.assertIsInstance(m.like(np.zeros((3, 1, 1))), BinaryMask)

    def test_require_same_grid(self):
        """Тест проверки совпадения размеров"""
        with self.assertRaisesRegex(ValueError, "dims mismatch"):
            BinaryMask.empty((2, 2, 2)).require_same_grid(BinaryMask.empty((2, 2, 3)))


class TestGraphModels(unittest.TestCase):
    """Тесты графа центральных линий"""

    def test_graph_accessors(self):
        """Тест списков узлов по типу и длины ветви"""
        nodes = [
            Node(0, (0, 0, 0), NodeKind.ENDPOINT),
            Node(1, (0, 0, 4), NodeKind.BIFURCATION),
            Node(2, (2, 0, 6), NodeKind.ENDPOINT),
            Node(3, (0, 2, 6), NodeKind.ENDPOINT),
        ]
        branches = [Branch(0, 0, 1, [(0, 0, 1), (0, 0, 2), (0, 0, 3)])]
        g = CenterlineGraph(nodes=nodes, branches=branches, root=0, dims=(4, 4, 8))

        self.assertEqual([n.node_id for n in g.bifurcations], [1])
        self.assertEqual(len(g.endpoints), 3)
        self.assertEqual(g.branch(0).length_vox, 3)
        self.assertIsNone(g.branch(0).mean_diameter_vox)


class TestErrorParams(unittest.TestCase):
    """Тесты параметров ошибок"""

    def test_airway_defaults(self):
        """Тест значений по умолчанию"""
        params = AirwayErrorParams()
        self.assertEqual(params.min_gap_len_vox, 10)
        self.assertEqual(params.mask_width_factor, 3.0)
        self.assertEqual(params.excluded_generations, frozenset({0, 1, 2}))

    def test_airway_validation(self):
        """Тест проверки долей и ширины"""
        with self.assertRaises(ValueError):
            AirwayErrorParams(max_rate_terminal=-0.1)
        with self.assertRaises(ValueError):
            AirwayErrorParams(mask_width_factor=0.0)

    def test_vessel_tables(self):
        """Тест таблиц разрывов по группам"""
        params = VesselErrorParams(0.6)
        self.assertEqual(params.table("long"), GapTable(6, 10, 35))
        self.assertEqual(params.table("medium"), GapTable(4, 10, 20))
        self.assertEqual(params.table("short"), GapTable(2, 6, 15))
        with self.assertRaises(ValueError):
            GapTable(2, 10, 5)


class TestCorruptionRecord(unittest.TestCase):
    """Тесты записи о порче метки"""

    def test_merge(self):
        """Тест объединения частичных записей"""
        a = CorruptionRecord(dims=(2, 2, 2), sampled_rates={"terminal": 0.3}, removed_counts={"terminal": 4},
                             events=[ErrorEvent(ErrorType.TERMINAL, 1, 0, 5, 6.0, 5)])
        b = CorruptionRecord(dims=(2, 2, 2), sampled_rates={"discontinuity": 0.1}, warnings=["none eligible"])
        merged = a.merge(b)

        self.assertEqual(set(merged.sampled_rates), {"terminal", "discontinuity"})
        self.assertEqual(len(merged.events), 1)
        self.assertEqual(merged.warnings, ["none eligible"])

    def test_merge_dims_mismatch(self):
        """Тест ошибки при разных размерах"""
        with self.assertRaises(ValueError):
            CorruptionRecord(dims=(2, 2, 2)).merge(CorruptionRecord(dims=(2, 2, 3)))


class TestModelSpec(unittest.TestCase):
    """Тесты описания сети"""

    def test_validation(self):
        """Тест проверки типа и нормализации"""
        with self.assertRaises(ValueError):
            ModelSpec(kind="resnet")
        with self.assertRaises(ValueError):
            ModelSpec(norm="batch")
        with self.assertRaises(ValueError):
            ModelSpec(levels=0)

    def test_dict_roundtrip(self):
        """Тест словаря описания"""
        spec = ModelSpec(kind="discriminator", in_channels=1, levels=4, base_channels=6, norm="instance")
        self.assertEqual(ModelSpec.from_dict(spec.to_dict()), spec)
        self.assertEqual(spec.divisor, 1)
        self.assertEqual(ModelSpec(levels=5).divisor, 16)

    def test_linear_layers(self):
        """Тест слоев линейной модели"""
        self.assertEqual(ModelSpec(kind="linear").layers(), ["conv3x3x3", "sigmoid"])
        self.assertEqual(ModelSpec(kind="discriminator", levels=1, convs_per_level=1, norm="none").layers(),
                         ["conv3x3x3", "leaky_relu", "conv1x1x1", "global_average", "sigmoid"])


class TestMetricsReport(unittest.TestCase):
    """Тесты отчета метрик"""

    def test_empty_report(self):
        """Тест: пустой отчет дает NaN"""
        aggregate = MetricsReport().aggregate
        self.assertTrue(math.isnan(aggregate["dice"]["mean"]))
        self.assertEqual(set(aggregate), {"dice", "completeness", "leakage", "gaps"})

    def test_dict_keeps_detected_components(self):
        """Тест: словарь отчета содержит число компонент найденной центральной линии"""
        report = MetricsReport([CaseMetrics("case_000", 0.9, 0.8, 0.1, -1, ncc_detected=2)])
        payload = report.to_dict()

        self.assertEqual(payload["cases"][0]["ncc_detected"], 2)
        self.assertEqual(payload["cases"][0]["gaps"], -1)
        self.assertEqual(MetricsReport.from_dict(payload).cases, report.cases)


if __name__ == '__main__':
    unittest.main()
