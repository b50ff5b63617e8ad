from sggan.cli import main
import sys

sys.exit(main())
