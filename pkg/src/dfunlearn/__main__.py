import sys

from dfunlearn.cli import main

sys.exit(main())
