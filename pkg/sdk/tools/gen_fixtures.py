#!/usr/bin/env python3
"""Regenerate the golden wire fixtures from the platform's own encoder."""

import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent / "tests"))
sys.path.insert(0, str(HERE.parent / "src"))
sys.path.insert(0, str(HERE.parent.parent / "src"))

from golden_catalog import platform_catalog  # noqa: E402


def main() -> None:
    out_dir = HERE.parent / "tests" / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in platform_catalog():
        (out_dir / f"{name}.bin").write_bytes(frame)
        print(f"wrote {name}.bin ({len(frame)} bytes)")


if __name__ == "__main__":
    main()
