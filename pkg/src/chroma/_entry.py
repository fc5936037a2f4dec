"""Console entry point. Applies the CHROMA_THREADS cap to the BLAS
thread pools before numpy is imported (1 = fully deterministic mode)."""

import os
import sys


def main() -> int:
    threads = os.environ.get("CHROMA_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from chroma.cli import main as cli_main
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
