import sys

from repmlp.cli import main

sys.exit(main())
