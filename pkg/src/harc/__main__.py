import sys

from harc.cli import main

sys.exit(main())
