import sys

from tascseg.cli import main

sys.exit(main())
