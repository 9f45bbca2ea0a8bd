"""Тесты скрипта запуска тестов"""

import io
import os
import unittest
from unittest.mock import patch

from tests.run_tests import ACCEPTANCE_ENV, build_suite, list_modules, main


class TestRunTests(unittest.TestCase):
    """Тесты списка модулей, выбора подмножества и включения долгих прогонов"""

    def test_list_modules(self):
        """Тест: список содержит модули без префикса test_"""
        modules = list_modules()
        self.assertIn("metrics", modules)
        self.assertIn("runner", modules)
        self.assertEqual(modules, sorted(modules))

        with patch("sys.stdout", new_callable=io.StringIO) as out:
            self.assertEqual(main(["--list"]), 0)
        self.assertEqual(out.getvalue().split(), modules)

    def test_subset_suite(self):
        """Тест: выбранный модуль дает непустой набор тестов"""
        self.assertGreater(build_suite(["rng"]).countTestCases(), 0)

    def test_unknown_module(self):
        """Тест: неизвестный модуль дает код 1"""
        with patch("sys.stdout", new_callable=io.StringIO) as out:
            self.assertEqual(main(["nosuch"]), 1)
        self.assertIn("nosuch", out.getvalue())

    def test_acceptance_flag_sets_environment(self):
        """Тест: --acceptance включает долгие прогоны через переменную окружения"""
        with patch.dict(os.environ, {}, clear=False), \
                patch("tests.run_tests.unittest.TextTestRunner") as runner, \
                patch("sys.stdout", new_callable=io.StringIO):
            os.environ.pop(ACCEPTANCE_ENV, None)
            runner.return_value.run.return_value.wasSuccessful.return_value = True
            self.assertEqual(main(["--acceptance", "rng"]), 0)
            self.assertEqual(os.environ[ACCEPTANCE_ENV], "1")
        runner.return_value.run.assert_called_once()


if __name__ == '__main__':
    unittest.main()
