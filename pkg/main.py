#!/usr/bin/env python3
"""
TreeLab - уточнение разметки древовидных структур (дыхательные пути, сосуды)
на синтетических ошибках

Основная точка входа: python main.py <команда> [флаги]
"""

import logging
import sys
from typing import Optional, Sequence

from cli import TreeLabCli


def setup_logging(level: int = logging.INFO, log_file: Optional[str] = "treelab.log"):
    """Настройка логирования"""
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers
    )

    # Подавляем избыточные логи от библиотек
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Главная функция"""
    setup_logging()
    logger = logging.getLogger(__name__)

    result = TreeLabCli().dispatch(argv)
    if result.exit_code == 0:
        if result.message:
            print(result.message)
        for path in result.paths:
            print(f"   📄 {path}")
    else:
        logger.info(f"Команда завершилась с кодом {result.exit_code}")
    return result.exit_code


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n👋 Прервано пользователем")
        sys.exit(130)
