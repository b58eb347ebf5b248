import sys

from regmip.cli import main

sys.exit(main())
