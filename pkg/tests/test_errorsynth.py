"""Тесты синтеза структурных ошибок"""

import unittest
from dataclasses import replace

import numpy as np

from errorsynth import (
    corrupt, cylinder_mask, inject_airway_discontinuities, inject_airway_terminal_errors, inject_vessel_gaps,
    length_groups, record_from_dict, record_to_dict, removal_union, round_half_up, sample_error_rate,
    select_branches_weighted,
)
from models import AirwayErrorParams, BinaryMask, ErrorType, PhantomSpec, VesselErrorParams
from phantom import generate_tree
from rng import make_rng
from skeleton import GraphError, build_graph
from volume import dilate_cube3


class TestSelection(unittest.TestCase):
    """Тесты выбора ветвей и долей ошибок"""

    def test_round_half_up(self):
        """Тест округления половин вверх"""
        self.assertEqual(round_half_up(0.5), 1)
        self.assertEqual(round_half_up(2.5), 3)
        self.assertEqual(round_half_up(0.49), 0)

    def test_sample_error_rate(self):
        """Тест доли ошибок в [0, upper]"""
        rng = make_rng(0, "rate")
        values = [sample_error_rate(0.3, rng) for _ in range(200)]
        self.assertTrue(all(0.0 <= v <= 0.3 for v in values))
        self.assertEqual(sample_error_rate(0.0, rng), 0.0)
        with self.assertRaises(ValueError):
            sample_error_rate(1.5, rng)

    def test_weighted_count_and_uniqueness(self):
        """Тест: выбирается round(rate * N) различных ветвей"""
        candidates = [(i, float(i % 3 + 1)) for i in range(10)]
        chosen = select_branches_weighted(candidates, 0.45, make_rng(1, "select"))
        self.assertEqual(len(chosen), 5)
        self.assertEqual(len(set(chosen)), 5)
        self.assertEqual(sorted(select_branches_weighted(candidates, 1.0, make_rng(2, "select"))), list(range(10)))

    def test_zero_weight_never_first(self):
        """Тест: ветвь с нулевым весом не выбирается, пока есть ненулевые"""
        candidates = [(0, 2.0), (1, 0.0), (2, 0.0)]
        for k in range(20):
            self.assertEqual(select_branches_weighted(candidates, 0.34, make_rng(k, "select")), [0])

    def test_weighted_frequencies(self):
        """Тест частот выбора, пропорциональных весам"""
        rng = make_rng(3, "select")
        picks = [select_branches_weighted([(0, 1.0), (1, 3.0)], 0.5, rng)[0] for _ in range(4000)]
        self.assertAlmostEqual(np.mean(picks), 0.75, delta=0.03)

    def test_first_draw_law_on_generations(self):
        """Тест частот первого выбора для поколений [1, 2, 3] на 10000 испытаниях"""
        candidates = [(0, 1.0), (1, 2.0), (2, 3.0)]
        rng = make_rng(7, "select")
        picks = np.array([select_branches_weighted(candidates, 1.0 / 3.0, rng)[0] for _ in range(10000)])
        frequencies = np.bincount(picks, minlength=3) / len(picks)

        for branch_id, expected in enumerate((1 / 6, 1 / 3, 1 / 2)):
            with self.subTest(branch_id=branch_id):
                self.assertAlmostEqual(frequencies[branch_id], expected, delta=0.03)

    def test_all_zero_weights(self):
        """Тест ошибки при нулевых весах всех кандидатов"""
        with self.assertRaises(ValueError):
            select_branches_weighted([(0, 0.0), (1, 0.0)], 1.0, make_rng(0))
        self.assertEqual(select_branches_weighted([(0, 0.0)], 0.0, make_rng(0)), [])


class TestCylinderMask(unittest.TestCase):
    """Тесты цилиндрической маски удаления"""

    def test_single_voxel_ball(self):
        """Тест шара радиуса 1.5 вокруг одного вокселя: 19 вокселей"""
        mask = cylinder_mask([(5, 5, 5)], 3.0, (11, 11, 11))
        self.assertEqual(mask.count, 19)
        self.assertTrue(mask.data[5, 5, 5])
        self.assertFalse(mask.data[6, 6, 6])

    def test_segment_clipped_at_border(self):
        """Тест отрезка у границы объема"""
        mask = cylinder_mask([(0, 0, z) for z in range(4)], 2.0, (6, 6, 6))
        self.assertTrue(mask.data[0, 0, 0])
        self.assertTrue(mask.data[1, 0, 3])
        self.assertFalse(mask.data[0, 0, 5])

    def test_invalid_arguments(self):
        """Тест пустого отрезка, нулевой ширины и выхода за объем"""
        with self.assertRaises(ValueError):
            cylinder_mask([], 2.0, (4, 4, 4))
        with self.assertRaises(ValueError):
            cylinder_mask([(1, 1, 1)], 0.0, (4, 4, 4))
        with self.assertRaises(ValueError):
            cylinder_mask([(4, 1, 1)], 2.0, (4, 4, 4))


class TestAirwayErrors(unittest.TestCase):
    """Тесты ошибок дыхательных путей на фантоме"""

    @classmethod
    def setUpClass(cls):
        cls.sample = generate_tree(PhantomSpec(seed=2))
        cls.label = cls.sample.gt_mask
        cls.graph = cls.sample.graph
        cls.params = AirwayErrorParams(0.75, 0.5)

    def test_terminal_errors_all_branches(self):
        """Тест удаления всех терминальных ветвей при rate = 1"""
        x, record = inject_airway_terminal_errors(self.label, self.graph, 1.0, self.params, make_rng(0, "t"))
        terminals = [b for b in self.graph.branches if b.is_terminal]

        self.assertEqual(sorted(record.affected["terminal"]), sorted(b.branch_id for b in terminals))
        for b in terminals:
            self.assertFalse(x.data[self.graph.nodes[b.node_to].xyz])
        for event in record.events:
            length = self.graph.branch(event.branch_id).length_vox
            self.assertLessEqual(event.start, (length - 1) // 2)
            self.assertEqual(event.stop, length)
            self.assertEqual(event.length_vox, length - event.start)

    def test_terminal_errors_only_remove(self):
        """Тест: результат является подмножеством метки, а маска удаления совпадает с разностью"""
        x, record = inject_airway_terminal_errors(self.label, self.graph, 0.5, self.params, make_rng(1, "t"))
        original, kept = self.label.as_bool(), x.as_bool()

        self.assertFalse(np.any(kept & ~original))
        np.testing.assert_array_equal(removal_union(record), original & ~kept)
        self.assertEqual(len(record.affected["terminal"]), 4)
        self.assertEqual(record.removed_counts["terminal"], int((original & ~kept).sum()))

    def test_discontinuities_on_allowed_generations(self):
        """Тест разрывов только в ветвях допустимых поколений"""
        x, record = inject_airway_discontinuities(self.label, self.graph, 1.0, self.params, make_rng(0, "d"))
        affected = record.affected["discontinuity"]

        self.assertEqual(len(affected), 8)
        for branch_id in affected:
            self.assertNotIn(self.graph.branch(branch_id).generation, self.params.excluded_generations)
        for event in record.events:
            n = max(self.graph.branch(event.branch_id).length_vox, 1)
            self.assertEqual(event.stop - event.start, event.length_vox)
            self.assertGreaterEqual(event.length_vox, min(self.params.min_gap_len_vox, n))
            self.assertLessEqual(event.stop, n)
        self.assertFalse(np.any(x.as_bool() & ~self.label.as_bool()))

    def test_no_eligible_branches(self):
        """Тест: без допустимых ветвей метка не меняется и пишется предупреждение"""
        params = replace(self.params, excluded_generations={0, 1, 2, 3})
        x, record = inject_airway_discontinuities(self.label, self.graph, 0.5, params, make_rng(0, "d"))

        np.testing.assert_array_equal(x.data, self.label.data)
        self.assertEqual(record.affected["discontinuity"], [])
        self.assertIn("no branches eligible for discontinuity errors", record.warnings)

    def test_missing_diameter(self):
        """Тест ошибки графа без оценок диаметра"""
        bare = build_graph(self.sample.gt_centerline, self.sample.root_hint)
        with self.assertRaises(GraphError):
            inject_airway_terminal_errors(self.label, bare, 1.0, self.params, make_rng(0))

    def test_dims_mismatch(self):
        """Тест ошибки при несовпадении размеров графа и метки"""
        with self.assertRaises(GraphError):
            corrupt(BinaryMask.empty((8, 8, 8)), self.graph, self.params, make_rng(0))

    def test_corrupt_is_deterministic(self):
        """Тест воспроизводимости при одинаковом зерне"""
        x_a, record_a = corrupt(self.label, self.graph, self.params, make_rng(9, "syn"), seed=9)
        x_b, record_b = corrupt(self.label, self.graph, self.params, make_rng(9, "syn"), seed=9)

        np.testing.assert_array_equal(x_a.data, x_b.data)
        self.assertEqual(record_to_dict(record_a), record_to_dict(record_b))
        self.assertEqual(record_a.seed, 9)

    def test_corrupt_removal_record(self):
        """Тест: объединение масок записи равно удаленным вокселям"""
        x, record = corrupt(self.label, self.graph, self.params, make_rng(4, "syn"))
        original = self.label.as_bool()

        self.assertFalse(np.any(x.as_bool() & ~original))
        np.testing.assert_array_equal(removal_union(record) & original, original & ~x.as_bool())
        self.assertEqual(set(record.sampled_rates), {"terminal", "discontinuity"})
        self.assertLessEqual(record.sampled_rates["terminal"], 0.75)

    def test_zero_rates_keep_label(self):
        """Тест: нулевые доли не меняют метку"""
        x, record = corrupt(self.label, self.graph, AirwayErrorParams(0.0, 0.0), make_rng(0))
        np.testing.assert_array_equal(x.data, self.label.data)
        self.assertEqual(sum(record.removed_counts.values()), 0)

    def test_record_dict_roundtrip(self):
        """Тест восстановления записи из словаря"""
        _, record = corrupt(self.label, self.graph, self.params, make_rng(5, "syn"), seed=5)
        restored = record_from_dict(record_to_dict(record))

        self.assertEqual(restored.dims, record.dims)
        self.assertEqual(restored.events, record.events)
        np.testing.assert_array_equal(removal_union(restored), removal_union(record))


class TestCorruptionOverSeeds(unittest.TestCase):
    """Тесты порчи метки фантома глубины 4 на 100 зернах"""

    @classmethod
    def setUpClass(cls):
        spec = PhantomSpec(dims=(96, 96, 96), depth=4, branch_len_range=(16.0, 20.0), length_decay=0.85,
                           max_retries=200, seed=0)
        cls.sample = generate_tree(spec)
        cls.label = cls.sample.gt_mask
        cls.graph = cls.sample.graph
        cls.seeds = range(100)

    def removed_count(self, params, seed) -> int:
        x, _ = corrupt(self.label, self.graph, params, make_rng(seed, "syn"))
        return int((self.label.as_bool() & ~x.as_bool()).sum())

    def test_tree_has_four_levels(self):
        """Тест: у фантома 31 ветвь и 16 терминальных"""
        self.assertEqual(len(self.graph.branches), 31)
        self.assertEqual(sum(b.is_terminal for b in self.graph.branches), 16)

    def test_invariants(self):
        """Тест: только удаление, запись совпадает с разностью, число ветвей равно round(rate * N)"""
        params = AirwayErrorParams(0.75, 0.5)
        original = self.label.as_bool()
        n_terminal = sum(b.is_terminal for b in self.graph.branches)
        n_candidates = sum(b.generation not in params.excluded_generations for b in self.graph.branches)

        for seed in self.seeds:
            x, record = corrupt(self.label, self.graph, params, make_rng(seed, "syn"), seed=seed)
            kept = x.as_bool()
            with self.subTest(seed=seed):
                self.assertFalse(np.any(kept & ~original))
                np.testing.assert_array_equal(removal_union(record), original & ~kept)
                self.assertEqual(len(record.affected["terminal"]),
                                 round_half_up(record.sampled_rates["terminal"] * n_terminal))
                self.assertEqual(len(record.affected["discontinuity"]),
                                 round_half_up(record.sampled_rates["discontinuity"] * n_candidates))
                for event in record.events:
                    if event.error_type == ErrorType.TERMINAL:
                        length = self.graph.branch(event.branch_id).length_vox
                        self.assertLessEqual(event.start, (length - 1) // 2)

    def test_rate_monotonicity(self):
        """Тест: среднее число удаленных вокселей не убывает с верхней границей доли"""
        means = []
        for bound in (0.0, 0.25, 0.5, 1.0):
            params = AirwayErrorParams(bound, bound)
            means.append(np.mean([self.removed_count(params, seed) for seed in self.seeds]))

        self.assertEqual(means[0], 0.0)
        for lower, upper in zip(means, means[1:]):
            self.assertLessEqual(lower, upper)


class TestVesselErrors(unittest.TestCase):
    """Тесты разрывов сосудов"""

    @classmethod
    def setUpClass(cls):
        cls.sample = generate_tree(PhantomSpec(seed=3, style="vessel", trunk_radius_vox=2.0))
        cls.params = VesselErrorParams(1.0)

    def test_length_groups(self):
        """Тест деления ветвей на три группы по длине"""
        groups = length_groups(self.sample.graph)
        names = [groups[b.branch_id] for b in self.sample.graph.branches]
        self.assertEqual([names.count(n) for n in ("long", "medium", "short")], [5, 5, 5])

        longest = max(self.sample.graph.branches, key=lambda b: (b.length_vox, -b.branch_id))
        self.assertEqual(groups[longest.branch_id], "long")

    def test_gaps_follow_tables(self):
        """Тест длины разрывов по таблицам групп"""
        centerline, graph = self.sample.gt_centerline, self.sample.graph
        kept, record = inject_vessel_gaps(centerline, graph, self.params, 1.0, make_rng(0, "gaps"))
        groups = length_groups(graph)

        self.assertEqual(len(record.affected["vessel_gap"]), 15)
        self.assertGreater(len(record.events), 0)
        for event in record.events:
            self.assertEqual(event.error_type, ErrorType.VESSEL_GAP)
            self.assertEqual(event.group, groups[event.branch_id])
            table = self.params.table(event.group)
            length = graph.branch(event.branch_id).length_vox
            self.assertLessEqual(event.length_vox, min(table.max_len, length))
            self.assertGreaterEqual(event.length_vox, min(table.min_len, length))
            self.assertEqual(event.stop - event.start, event.length_vox)

        full = dilate_cube3(centerline).as_bool()
        self.assertFalse(np.any(kept.as_bool() & ~full))
        self.assertEqual(record.removed_counts["vessel_gap"], int((full & ~kept.as_bool()).sum()))
        self.assertGreater(record.removed_counts["vessel_gap"], 0)

    def test_corrupt_vessel_label(self):
        """Тест: из метки удаляются только воксели внутри маски разрывов"""
        label = self.sample.gt_mask
        x, record = corrupt(label, self.sample.graph, self.params, make_rng(1, "syn"),
                            centerline=self.sample.gt_centerline)
        original = label.as_bool()

        self.assertFalse(np.any(x.as_bool() & ~original))
        np.testing.assert_array_equal(removal_union(record), original & ~x.as_bool())

    def test_zero_rate(self):
        """Тест: нулевая доля не меняет метку сосудов"""
        label = self.sample.gt_mask
        x, _ = corrupt(label, self.sample.graph, VesselErrorParams(0.0), make_rng(0),
                       centerline=self.sample.gt_centerline)
        np.testing.assert_array_equal(x.data, label.data)


if __name__ == '__main__':
    unittest.main()
