import sys

from percsplat.cli import main

sys.exit(main())
