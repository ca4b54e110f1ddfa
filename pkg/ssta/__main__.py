import sys

from ssta.cli import main

sys.exit(main())
