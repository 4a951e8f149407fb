import sys

from bitmcts.cli import main

sys.exit(main())
