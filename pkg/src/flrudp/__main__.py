import sys

from flrudp.cli import main

sys.exit(main())
