from spindrop.cli import main
import sys

sys.exit(main())
