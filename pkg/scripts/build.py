#!/usr/bin/env python3
"""
Build script for the shipped fixture.
Generates the train and val robust splits from data/fixture_annotations.json
and saves them next to it, with their statistics.
"""

import os
import sys
import traceback
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).resolve().parent.parent
sys.path.append(str(project_root))

from rris.config import default_seed  # noqa: E402
from rris.dataset import build_robust_split, compute_stats, load_annotations, serialize  # noqa: E402
from rris.errors import RrisError  # noqa: E402
from rris.logging import logger, set_verbose  # noqa: E402

data_dir = project_root / "data"
annotations_path = data_dir / "fixture_annotations.json"
output_dir = Path(os.environ.get("RRIS_BUILD_DIR", data_dir / "build"))

set_verbose(True)
logger.info(f"Annotations: {annotations_path}")
logger.info(f"Output directory: {output_dir}")

try:
    dataset = load_annotations(annotations_path)
    seed = default_seed()

    for split in ("train", "val"):
        robust = build_robust_split(dataset, split, seed, progress=True)
        path = output_dir / f"{split}.json"
        serialize(robust, path)
        logger.info(f"Saved {len(robust.references)} {split} references to {path} ({path.stat().st_size} bytes)")
        print(compute_stats(robust).format_table())

except RrisError as e:
    logger.error(f"Build failed: {e}")
    sys.exit(e.exit_code)
except Exception as e:
    logger.error(f"ERROR in build script: {str(e)}")
    traceback.print_exc()
    sys.exit(1)
