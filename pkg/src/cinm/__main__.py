import sys

from .cli import opt_main

sys.exit(opt_main())
