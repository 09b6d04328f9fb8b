import sys

from camforge.cli import main

sys.exit(main())
