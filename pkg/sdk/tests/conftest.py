import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
for p in (str(HERE), str(HERE.parent / "src"), str(HERE.parent.parent / "src")):
    if p not in sys.path:
        sys.path.insert(0, p)
