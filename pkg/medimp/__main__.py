import sys

from medimp.main import main

sys.exit(main())
