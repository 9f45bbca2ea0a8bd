"""Ввод-вывод объемов (MetaImage) и морфологические примитивы"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy import ndimage

from models import BinaryMask, Volume


logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
}
ELEMENT_NAMES = {"uint8": "MET_UCHAR", "float32": "MET_FLOAT"}


def _parse_header(path: Path) -> Dict[str, str]:
    header = {}
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def read_mhd(path: PathLike) -> Volume:
    """Читает пару заголовок MHD + RAW (3D, uint8 или float32, без сжатия)"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"header not found: {path}")
    header = _parse_header(path)

    if header.get("ObjectType", "Image") != "Image":
        raise ValueError(f"unsupported ObjectType: {header['ObjectType']}")
    if int(header.get("NDims", "0")) != 3:
        raise ValueError(f"only 3 dimensions are supported, got NDims={header.get('NDims')}")
    if header.get("CompressedData", "False").lower() == "true":
        raise ValueError("compressed raw data is not supported")
    element_type = header.get("ElementType")
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f"unsupported element type: {element_type}")
    if "DimSize" not in header or "ElementDataFile" not in header:
        raise ValueError(f"incomplete header: {path}")

    dims = tuple(int(v) for v in header["DimSize"].split())
    if len(dims) != 3:
        raise ValueError(f"DimSize must have 3 values, got {header['DimSize']}")
    spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())

    data_name = header["ElementDataFile"]
    if data_name.upper() == "LOCAL":
        raise ValueError("embedded (LOCAL) data is not supported")
    raw_path = path.parent / data_name
    if not raw_path.exists():
        raise FileNotFoundError(f"raw data not found: {raw_path}")

    dtype = ELEMENT_TYPES[element_type]
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"size mismatch: header expects {expected} bytes, {raw_path.name} has {len(raw)}")

    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if element_type == "MET_UCHAR" and np.all(data <= 1):
        return BinaryMask(data, spacing)
    return Volume(data, spacing)


def write_mhd(v: Volume, path: PathLike, elem: str = "float32") -> Tuple[Path, Path]:
    """Записывает объем как пару MHD + RAW; бинарная маска всегда пишется как uint8"""
    path = Path(path)
    if isinstance(v, BinaryMask):
        elem = "uint8"
    if elem not in ELEMENT_NAMES:
        raise ValueError(f"unsupported element type: {elem}")

    if elem == "uint8":
        values = np.rint(v.data)
        if values.min() < 0 or values.max() > 255:
            raise ValueError("values outside [0, 255] cannot be written as uint8")
        payload = values.astype("<u1")
    else:
        payload = v.data.astype("<f4")

    raw_path = path.with_suffix(".raw")
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "DimSize = " + " ".join(str(n) for n in v.dims),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in v.spacing),
        f"ElementType = {ELEMENT_NAMES[elem]}",
        f"ElementDataFile = {raw_path.name}",
    ]
    raw_path.write_bytes(payload.ravel(order="F").tobytes())
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    logger.debug(f"Wrote {path} ({elem}, dims {v.dims})")
    return path, raw_path


def read_mask(path: PathLike) -> BinaryMask:
    """Читает файл и требует бинарное содержимое"""
    v = read_mhd(path)
    if isinstance(v, BinaryMask):
        return v
    return BinaryMask(v.data, v.spacing)


def threshold(y: Volume, t: float = 0.5) -> BinaryMask:
    """Бинаризация: воксель = 1 тогда и только тогда, когда y >= t"""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    if y.data.min() < 0.0 or y.data.max() > 1.0:
        raise ValueError("probability map values must be in [0, 1]")
    return BinaryMask(y.data >= t, y.spacing)


CUBE3 = np.ones((3, 3, 3), dtype=bool)


def dilate_cube3(m: BinaryMask) -> BinaryMask:
    """Дилатация кубическим элементом 3x3x3 (с отсечением на границах)"""
    return m.like(ndimage.binary_dilation(m.as_bool(), structure=CUBE3))


def structure(connectivity: int) -> np.ndarray:
    """Структурный элемент для 6- или 26-связности"""
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(m: BinaryMask, connectivity: int = 26) -> Tuple[Volume, int]:
    """Разметка связных компонент переднего плана"""
    labels, count = ndimage.label(m.as_bool(), structure=structure(connectivity))
    return Volume(labels, m.spacing), int(count)


def count_components(mask: np.ndarray, connectivity: int = 26) -> int:
    """Число связных компонент булева массива"""
    return int(ndimage.label(mask, structure=structure(connectivity))[1])


def distance_transform(m: BinaryMask) -> Volume:
    """Точное евклидово расстояние (в вокселях) до ближайшего фона.

    Снаружи объема считается виртуальный слой фона, поэтому структуры,
    касающиеся границы, получают конечный радиус.
    """
    padded = np.pad(m.as_bool(), 1, mode="constant", constant_values=False)
    distances = ndimage.distance_transform_edt(padded)
    return Volume(distances[1:-1, 1:-1, 1:-1], m.spacing)


def linear_index(xyz, dims) -> int:
    """Линейный индекс вокселя в порядке x-fastest"""
    x, y, z = xyz
    return int(x + dims[0] * (y + dims[1] * z))


def rle_encode(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Кодирование длинами серий в порядке x-fastest: список (начало, длина)"""
    flat = np.asarray(mask, dtype=bool).ravel(order="F").astype(np.int8)
    edges = np.diff(np.concatenate(([0], flat, [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [(int(a), int(b - a)) for a, b in zip(starts, stops)]


def rle_decode(runs, dims) -> np.ndarray:
    """Обратное к rle_encode"""
    flat = np.zeros(int(np.prod(dims)), dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(dims, order="F")
