import sys

from tpfl.cli import main

sys.exit(main())
