SECRET_KEY = "FOOBAR"

MIDDLEWARE = []
INSTALLED_APPS = [
    "django_ood_calibration",
]

OODCAL_DEVICE = "cpu"
OODCAL_CACHE = "default"
OODCAL_NUM_THREADS = 1

CACHES = {
    "default": {
        "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
        "LOCATION": "ood-calibration",
    },
    "dummy": {
        "BACKEND": "django.core.cache.backends.dummy.DummyCache",
    },
}

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {"null": {"class": "logging.NullHandler"}},
    "loggers": {"django_ood_calibration": {"handlers": ["null"], "level": "INFO"}},
}
