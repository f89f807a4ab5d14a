import sys

from vgn.cli import main

sys.exit(main())
