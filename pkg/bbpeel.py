"""bbpeel entrypoint (minimal dispatcher only).

Core implementation lives in:
  * bbpeel_core.py     - headless CLI, experiment harness, events and reports
  * bbpeel_<topic>.py  - library modules (code, circuit, dem, sampler, decoder, theory, streaming)

This file stays tiny so `python bbpeel.py ...` and the console script share one entry.
For programmatic use, import needed symbols directly from the library modules or bbpeel_core.
"""
from __future__ import annotations

import sys
from bbpeel_core import headless_main


def main(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        # bare invocation shows usage instead of an argparse error
        args = ['--help']
    return headless_main(args)


if __name__ == '__main__':  # pragma: no cover
    raise SystemExit(main())

# End of dispatcher file.
