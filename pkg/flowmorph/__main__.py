import sys

from flowmorph.cli import main

sys.exit(main())
