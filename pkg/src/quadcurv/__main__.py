import sys

from quadcurv.cli import main

sys.exit(main())
