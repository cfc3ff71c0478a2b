import sys

from hierbert.cli import main

sys.exit(main())
