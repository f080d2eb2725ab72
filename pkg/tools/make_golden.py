"""Regenerate tests/golden/*.json from the golden fixture frame.

Only run this after an intended output change, and re-audit the files.
"""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from cases import golden_documents  # noqa: E402
from synthpan.annotate import write_document  # noqa: E402


def main():
    inst, pan = golden_documents()
    out = ROOT / "tests" / "golden"
    write_document(inst, out / "fixture_instances.json")
    write_document(pan, out / "fixture_panoptic.json")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
