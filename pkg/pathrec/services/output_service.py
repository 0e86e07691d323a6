import csv
import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from pathrec.models.errors import ConfigError, GridFormatError

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["iter", "time_s", "loss", "eps", "delta", "stage"]
CHECKPOINT_CSV_HEADER = LOSS_CSV_HEADER + ["phase"]


class OutputService:
    """Result files: PFM radiance images, PGM previews, CSV logs, run manifests"""

    @staticmethod
    def _check_finite(image: np.ndarray, path: Path) -> None:
        bad = np.flatnonzero(~np.isfinite(image))
        if bad.size:
            error_msg = f"Image {path} has {bad.size} non-finite pixels, first at index {int(bad[0])}"
            logger.error(f"❌ {error_msg}")
            raise ValueError(error_msg)

    @staticmethod
    def emit_image(path: Union[str, Path], image: np.ndarray) -> None:
        """Single-channel PFM, little-endian (scale -1.0), rows stored bottom-up"""
        path = Path(path)
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {image.shape}")
        OutputService._check_finite(image, path)
        height, width = image.shape
        payload = np.flipud(image).astype("<f4").tobytes()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
                f.write(payload)
        except OSError as e:
            error_msg = f"Cannot write image {path}: {str(e)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        logger.debug(f"   Image written: {path} ({height}x{width})")

    @staticmethod
    def load_image(path: Union[str, Path]) -> np.ndarray:
        path = Path(path)
        if not path.is_file():
            error_msg = f"Image file not found: {path}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        data = path.read_bytes()
        lines = data.split(b"\n", 3)
        if len(lines) < 4 or lines[0].strip() != b"Pf":
            raise GridFormatError(f"{path} is not a single-channel PFM", offset=0)
        try:
            width, height = (int(x) for x in lines[1].split())
            scale = float(lines[2])
        except ValueError:
            raise GridFormatError(f"{path} has a malformed PFM header", offset=len(lines[0]) + 1)
        offset = len(lines[0]) + len(lines[1]) + len(lines[2]) + 3
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height
        if len(data) - offset < 4 * count:
            raise GridFormatError(f"{path} payload truncated", offset=len(data))
        image = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(height, width)
        return np.flipud(image).astype(np.float64)

    @staticmethod
    def emit_preview(path: Union[str, Path], image: np.ndarray, gamma: float = 2.2) -> None:
        """8-bit binary PGM, tone-mapped by max normalization and gamma"""
        path = Path(path)
        image = np.asarray(image, dtype=np.float64)
        peak = float(image.max()) if image.size else 0.0
        scaled = np.clip(image / peak, 0.0, 1.0) if peak > 0.0 else np.zeros_like(image)
        pixels = np.round(255.0 * scaled ** (1.0 / gamma)).astype(np.uint8)
        height, width = pixels.shape
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())

    @staticmethod
    def emit_csv(path: Union[str, Path], rows: Iterable[Sequence[Any]], header: List[str] = LOSS_CSV_HEADER) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\r\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow(["" if value is None else value for value in row])
        except OSError as e:
            error_msg = f"Cannot write CSV {path}: {str(e)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        logger.debug(f"   CSV written: {path}")

    @staticmethod
    def append_csv_row(path: Union[str, Path], row: Sequence[Any], header: List[str] = LOSS_CSV_HEADER) -> None:
        path = Path(path)
        new_file = not path.exists()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as f:
            writer = csv.writer(f, lineterminator="\r\n")
            if new_file:
                writer.writerow(header)
            writer.writerow(["" if value is None else value for value in row])

    @staticmethod
    def library_versions() -> Dict[str, str]:
        import numba
        import pydantic
        import scipy

        from pathrec import __version__

        return {
            "pathrec": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "pydantic": pydantic.VERSION,
        }

    @staticmethod
    def write_manifest(out_dir: Union[str, Path], config: Dict[str, Any], extra: Dict[str, Any] = None) -> Path:
        """manifest.json with the config echo, library versions and seed"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config": config,
            "versions": OutputService.library_versions(),
        }
        if extra:
            manifest.update(extra)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, default=str))
        logger.info(f"📋 Manifest written: {path}")
        return path
