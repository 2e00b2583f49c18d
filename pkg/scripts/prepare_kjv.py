"""Build ``data/kjv.txt.gz`` from the public-domain King James Bible.

The text ships inside the ``pythonbible-kjv`` wheel on PyPI. We pull the
plain-text module out of the wheel, strip verse numbers and the bracketed
italics markers, lowercase, split punctuation off words, and regroup
consecutive verses into sequences of at least ``--min-tokens`` tokens, one
per output line.

    pip download --no-deps pythonbible-kjv==0.0.2 -d /tmp/kjv
    python scripts/prepare_kjv.py /tmp/kjv/pythonbible_kjv-0.0.2-py3-none-any.whl
"""

from __future__ import annotations

import argparse
import gzip
import re
import zipfile
from pathlib import Path

VERSE_MARK = re.compile(r"(?:^|\s)\d+\.\s")
PUNCT = re.compile(r"([^\w\s'])")


def verses(body: str):
    for line in body.split("\n"):
        for chunk in VERSE_MARK.split(line):
            chunk = chunk.replace("[", "").replace("]", "").strip()
            if chunk:
                yield PUNCT.sub(r" \1 ", chunk.lower()).split()


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel", type=Path)
    ap.add_argument("-o", "--output", type=Path, default=Path("data/kjv.txt.gz"))
    ap.add_argument("--min-tokens", type=int, default=60)
    args = ap.parse_args(argv)

    with zipfile.ZipFile(args.wheel) as zf:
        src = zf.read("pythonbible_kjv/plain_text_bible.py").decode("utf-8")
    start = src.index('"""') + 3
    body = src[start:src.index('"""', start)]

    out, buf = [], []
    for words in verses(body):
        buf.extend(words)
        if len(buf) >= args.min_tokens:
            out.append(" ".join(buf))
            buf = []
    if buf:
        out.append(" ".join(buf))

    args.output.parent.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archive byte-stable across rebuilds
    with open(args.output, "wb") as raw, gzip.GzipFile(
        fileobj=raw, mode="wb", mtime=0, filename=""
    ) as fh:
        fh.write(("\n".join(out) + "\n").encode("utf-8"))
    print(f"wrote {len(out)} sequences to {args.output}")


if __name__ == "__main__":
    main()
