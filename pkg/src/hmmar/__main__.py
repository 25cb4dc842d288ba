import sys

from hmmar.cli import main

sys.exit(main())
