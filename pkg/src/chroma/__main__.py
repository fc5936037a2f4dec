import sys

from chroma._entry import main

sys.exit(main())
