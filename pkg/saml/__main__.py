# Copyright (c) 2026, saml-pipeline contributors.

import sys

from .cli import main

sys.exit(main())
