import os

# Mirror tox.ini setenv so plain pytest runs the Django test suite.
os.environ.setdefault("DJANGO_SETTINGS_MODULE", "test_settings")
os.environ.setdefault("MPLBACKEND", "Agg")

import django  # noqa: E402

django.setup()
