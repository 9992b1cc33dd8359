"""Regenerate the packaged perceptual-extractor fixture (data/perceptual.ahpx).

The file is fully determined by ExtractorSpec's defaults; rerunning this
script must reproduce it byte-for-byte.
"""

from __future__ import annotations

from pathlib import Path

from hdrkit.losses import ExtractorSpec, PerceptualExtractor


def main() -> None:
    out = Path(__file__).resolve().parent.parent / "src" / "hdrkit" / "data" / "perceptual.ahpx"
    out.parent.mkdir(parents=True, exist_ok=True)
    extractor = PerceptualExtractor.from_seed(ExtractorSpec())
    out.write_bytes(extractor.to_bytes())
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
