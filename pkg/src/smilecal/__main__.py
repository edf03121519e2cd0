import sys

from smilecal.cli import main

sys.exit(main())
