"""Тесты командной строки"""

import io
import json
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

import main
from cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, TreeLabCli, load_error_params
from models import AirwayErrorParams, ModelSpec, PhantomSpec, VesselErrorParams
from network import DivergenceError, build_model, save_checkpoint
from phantom import case_spec
from rng import torch_generator
from volume import read_mhd


class TestTreeLabCli(unittest.TestCase):
    """Тесты TreeLabCli"""

    @classmethod
    def setUpClass(cls):
        cls.data_dir = tempfile.mkdtemp()
        spec_path = os.path.join(cls.data_dir, "spec.json")
        with open(spec_path, "w", encoding="utf-8") as f:
            json.dump({"dims": [32, 32, 32], "depth": 1, "trunk_radius_vox": 2.0,
                       "branch_len_range": [7.0, 9.0]}, f)
        cls.dataset = os.path.join(cls.data_dir, "phantoms")
        result = TreeLabCli(stderr=io.StringIO()).dispatch(
            ["phantom", "--spec", spec_path, "--n", "2", "--out", cls.dataset, "--seed", "3"])
        assert result.exit_code == EXIT_OK, result.message

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.data_dir)

    def setUp(self):
        """Настройка тестового окружения"""
        self.temp_dir = tempfile.mkdtemp()
        self.stderr = io.StringIO()
        self.cli = TreeLabCli(stderr=self.stderr)

    def tearDown(self):
        """Очистка после тестов"""
        shutil.rmtree(self.temp_dir)

    def case_file(self, name: str) -> str:
        return os.path.join(self.dataset, "case_000", name)

    def out(self, name: str) -> str:
        return os.path.join(self.temp_dir, name)

    def test_phantom_dataset_layout(self):
        """Тест каталога фантомов и манифеста"""
        with open(os.path.join(self.dataset, "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual([c["id"] for c in manifest["cases"]], ["case_000", "case_001"])
        self.assertEqual(manifest["spec"]["depth"], 1)
        for name in ("image.mhd", "gt.mhd", "centerline.mhd", "bounds.mhd", "graph.json"):
            self.assertTrue(os.path.exists(self.case_file(name)), name)

    def test_usage_errors(self):
        """Тест кода 1 для неверных команд и флагов"""
        self.assertEqual(self.cli.dispatch([]).exit_code, EXIT_USAGE)
        self.assertEqual(self.cli.dispatch(["unknown"]).exit_code, EXIT_USAGE)
        self.assertEqual(self.cli.dispatch(["phantom", "--n", "2"]).exit_code, EXIT_USAGE)
        self.assertEqual(self.cli.dispatch(["train-base"]).exit_code, EXIT_USAGE)
        self.assertIn("--config", self.stderr.getvalue())

    def test_corrupt_command(self):
        """Тест порчи метки: результат внутри исходной метки, запись в JSON"""
        params = self.out("params.json")
        with open(params, "w", encoding="utf-8") as f:
            json.dump({"max_rate_terminal": 1.0, "max_rate_discontinuity": 0.0}, f)
        result = self.cli.dispatch(["corrupt", "--in", self.case_file("gt.mhd"), "--graph",
                                    self.case_file("graph.json"), "--params", params, "--out",
                                    self.out("x_syn.mhd"), "--record", self.out("record.json"), "--seed", "1"])

        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        x_syn = read_mhd(self.out("x_syn.mhd")).data.astype(bool)
        gt = read_mhd(self.case_file("gt.mhd")).data.astype(bool)
        self.assertFalse(np.any(x_syn & ~gt))
        with open(self.out("record.json"), "r", encoding="utf-8") as f:
            record = json.load(f)
        self.assertEqual(record["seed"], 1)
        self.assertEqual(int((gt & ~x_syn).sum()), sum(record["removed_counts"].values()))

    def test_corrupt_missing_input(self):
        """Тест кода 2 для отсутствующего файла"""
        result = self.cli.dispatch(["corrupt", "--in", self.out("absent.mhd"), "--graph", "g.json",
                                    "--params", "p.json", "--out", self.out("x.mhd"), "--record", self.out("r.json")])
        self.assertEqual(result.exit_code, EXIT_DATA)

    def test_skeletonize_command(self):
        """Тест скелета и графа"""
        result = self.cli.dispatch(["skeletonize", "--in", self.case_file("gt.mhd"), "--out", self.out("skel.mhd"),
                                    "--graph", self.out("graph.json"), "--root", "16,16,4"])
        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        with open(self.out("graph.json"), "r", encoding="utf-8") as f:
            graph = json.load(f)
        self.assertGreaterEqual(len(graph["branches"]), 1)
        self.assertEqual(self.cli.dispatch(["skeletonize", "--in", "x.mhd", "--out", "y.mhd",
                                            "--root", "1,2"]).exit_code, EXIT_USAGE)

    def test_skeletonize_graph_feeds_corrupt(self):
        """Тест цепочки skeletonize -> corrupt: граф содержит поколения и диаметры"""
        graph_path = self.out("graph.json")
        result = self.cli.dispatch(["skeletonize", "--in", self.case_file("gt.mhd"), "--out", self.out("skel.mhd"),
                                    "--graph", graph_path, "--root", "16,16,4"])
        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        with open(graph_path, "r", encoding="utf-8") as f:
            graph = json.load(f)
        self.assertTrue(all(b["generation"] is not None for b in graph["branches"]))
        self.assertTrue(all(b["mean_diameter_vox"] > 0 for b in graph["branches"]))

        params = self.out("params.json")
        with open(params, "w", encoding="utf-8") as f:
            json.dump({"max_rate_terminal": 1.0, "max_rate_discontinuity": 1.0,
                       "excluded_generations": [0]}, f)
        result = self.cli.dispatch(["corrupt", "--in", self.case_file("gt.mhd"), "--graph", graph_path,
                                    "--params", params, "--out", self.out("x_syn.mhd"),
                                    "--record", self.out("record.json"), "--seed", "2"])
        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        x_syn = read_mhd(self.out("x_syn.mhd")).data.astype(bool)
        gt = read_mhd(self.case_file("gt.mhd")).data.astype(bool)
        self.assertFalse(np.any(x_syn & ~gt))

    def test_phantom_uses_config(self):
        """Тест phantom с --config: каталог, зерно и стиль берутся из конфигурации"""
        spec_path = self.out("spec.json")
        with open(spec_path, "w", encoding="utf-8") as f:
            json.dump({"dims": [32, 32, 32], "depth": 1, "trunk_radius_vox": 2.0, "branch_len_range": [7.0, 9.0]}, f)
        config = self.out("config.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"data_dir": self.out("vessels"), "structure": "vessel", "seed": 3}, f)

        result = self.cli.dispatch(["phantom", "--spec", spec_path, "--n", "1", "--config", config])
        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        with open(os.path.join(self.out("vessels"), "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["spec"]["style"], "vessel")
        self.assertEqual(manifest["cases"][0]["seed"], case_spec(PhantomSpec(seed=0), 0, 3).seed)
        self.assertEqual(self.cli.dispatch(["phantom", "--spec", spec_path, "--n", "1"]).exit_code, EXIT_USAGE)

    def test_corrupt_params_from_config(self):
        """Тест corrupt без --params: параметры ошибок из конфигурации"""
        config = self.out("config.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"airway": {"max_rate_terminal": 1.0, "max_rate_discontinuity": 0.0}}, f)
        result = self.cli.dispatch(["corrupt", "--in", self.case_file("gt.mhd"), "--graph",
                                    self.case_file("graph.json"), "--config", config, "--out",
                                    self.out("x_syn.mhd"), "--record", self.out("record.json")])
        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        self.assertEqual(self.cli.dispatch(["corrupt", "--in", self.case_file("gt.mhd"), "--graph", "g.json",
                                            "--out", "x.mhd", "--record", "r.json"]).exit_code, EXIT_USAGE)

    def test_evaluate_command(self):
        """Тест метрик для предсказания, совпадающего с эталоном"""
        pred_dir = self.out("pred")
        os.makedirs(pred_dir)
        shutil.copy(self.case_file("gt.mhd"), os.path.join(pred_dir, "case_000_x2.mhd"))
        shutil.copy(self.case_file("gt.raw"), os.path.join(pred_dir, "gt.raw"))
        result = self.cli.dispatch(["evaluate", "--pred", pred_dir, "--gt", self.dataset, "--centerlines",
                                    self.dataset, "--out", self.out("metrics.json"), "--suffix", "_x2"])

        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        with open(self.out("metrics.json"), "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(report["cases"][0]["id"], "case_000")
        self.assertEqual(report["cases"][0]["dice"], 1.0)
        self.assertEqual(report["cases"][0]["completeness"], 1.0)

    def test_infer_command(self):
        """Тест вывода необученной сети: вероятность 0.5 и маска внутри bounds"""
        spec = ModelSpec(kind="unet", levels=2, base_channels=2, convs_per_level=1)
        checkpoint = save_checkpoint(build_model(spec, torch_generator(0, "cli")), self.out("base.ckpt"))
        result = self.cli.dispatch(["infer", "--checkpoint", str(checkpoint), "--image", self.case_file("image.mhd"),
                                    "--bounds", self.case_file("bounds.mhd"), "--out", self.out("y.mhd"),
                                    "--mask-out", self.out("x.mhd"), "--patch", "16"])

        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        self.assertTrue(np.all(read_mhd(self.out("y.mhd")).data == 0.5))
        mask = read_mhd(self.out("x.mhd")).data
        bounds = read_mhd(self.case_file("bounds.mhd")).data
        np.testing.assert_array_equal(mask, bounds)

    def test_infer_requires_label_for_refiner(self):
        """Тест: двухканальной сети нужен --label"""
        spec = ModelSpec(kind="unet", in_channels=2, levels=2, base_channels=2, convs_per_level=1)
        checkpoint = save_checkpoint(build_model(spec, torch_generator(0, "cli")), self.out("refiner.ckpt"))
        result = self.cli.dispatch(["infer", "--checkpoint", str(checkpoint), "--image", self.case_file("image.mhd"),
                                    "--out", self.out("y.mhd"), "--patch", "16"])
        self.assertEqual(result.exit_code, EXIT_USAGE)

    def write_config(self, payload) -> str:
        path = self.out("config.json")
        payload = {"data_dir": self.dataset, "out_dir": self.out("run"), **payload}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        return path

    def test_invalid_config(self):
        """Тест кода 2 для неизвестного ключа конфигурации"""
        config = self.write_config({"epochs": 3})
        result = self.cli.dispatch(["pipeline", "--config", config])
        self.assertEqual(result.exit_code, EXIT_DATA)
        self.assertIn("unknown config keys", self.stderr.getvalue())

    def test_numeric_failure(self):
        """Тест кода 3 при расхождении обучения"""
        config = self.write_config({"train": ["case_000"], "test": ["case_001"]})
        with patch("cli.RefinementPipeline.run", side_effect=DivergenceError("non-finite loss at step 4")):
            result = self.cli.dispatch(["pipeline", "--config", config])
        self.assertEqual(result.exit_code, EXIT_NUMERIC)
        self.assertIn("numerical failure", self.stderr.getvalue())

    def test_train_base_command(self):
        """Тест обучения базовой сети из командной строки"""
        config = self.write_config({"train": ["case_000"], "val": ["case_001"], "patch_size": 16,
                                    "base_steps": 1, "validate_every": 1,
                                    "model": {"levels": 2, "base_channels": 2, "convs_per_level": 1}})
        result = self.cli.dispatch(["train-base", "--config", config, "--seed", "5"])

        self.assertEqual(result.exit_code, EXIT_OK, result.message)
        self.assertTrue(os.path.exists(os.path.join(self.out("run"), "checkpoints", "base.ckpt")))


class TestErrorParams(unittest.TestCase):
    """Тесты загрузки параметров ошибок"""

    def setUp(self):
        """Настройка тестового окружения"""
        self.temp = tempfile.NamedTemporaryFile("w", suffix=".json", delete=False, encoding="utf-8")
        self.temp.close()

    def tearDown(self):
        """Очистка после тестов"""
        os.unlink(self.temp.name)

    def load(self, payload):
        with open(self.temp.name, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        return load_error_params(self.temp.name)

    def test_airway_and_vessel(self):
        """Тест выбора типа параметров по ключам"""
        self.assertIsInstance(self.load({"max_rate_terminal": 0.5}), AirwayErrorParams)
        vessel = self.load({"max_rate": 0.6, "long": {"max_gaps": 2, "min_len": 5, "max_len": 9}})
        self.assertIsInstance(vessel, VesselErrorParams)
        self.assertEqual(vessel.long.max_len, 9)
        with self.assertRaises(ValueError):
            self.load([0.5])


class TestMain(unittest.TestCase):
    """Тесты точки входа"""

    @patch("main.setup_logging")
    def test_main_returns_exit_code(self, mock_logging):
        """Тест кода выхода main"""
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(main.main([]), EXIT_USAGE)
        mock_logging.assert_called_once()


if __name__ == '__main__':
    unittest.main()
