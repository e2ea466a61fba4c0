import sys

from riskcp.cli import main

sys.exit(main())
