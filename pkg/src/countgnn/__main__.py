import sys

from countgnn.cli import main

sys.exit(main())
