import sys

from setdist.cli import main

sys.exit(main())
