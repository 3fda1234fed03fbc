import sys

from rasda.harness.cli import main

sys.exit(main())
