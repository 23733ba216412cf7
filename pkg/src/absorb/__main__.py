import sys

from absorb.cli import main

sys.exit(main())
