"""Minimal frame-range cutter usable as the transcoder command.

    python -m curator.y4mcut SRC START END OUT [START END OUT ...]
"""

import sys

from .frame_io import cut_y4m


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) < 4 or (len(args) - 1) % 3:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    src, rest = args[0], args[1:]
    ranges, outputs = [], []
    for i in range(0, len(rest), 3):
        ranges.append((int(rest[i]), int(rest[i + 1])))
        outputs.append(rest[i + 2])
    try:
        cut_y4m(src, ranges, outputs)
    except (OSError, ValueError) as exc:
        print(f"y4mcut: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
