import sys

from progdistill.runner.cli import main

sys.exit(main())
