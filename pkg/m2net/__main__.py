import sys

from m2net.main import main

sys.exit(main())
