import sys

from cometrisk.cli import main

sys.exit(main())
