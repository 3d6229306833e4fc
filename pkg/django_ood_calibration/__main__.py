import os
import sys


def main(argv=None):
    if not os.environ.get("DJANGO_SETTINGS_MODULE"):
        from django.conf import settings

        settings.configure(
            INSTALLED_APPS=["django_ood_calibration"],
            CACHES={
                "default": {
                    "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
                    "LOCATION": "ood-calibration",
                }
            },
            LOGGING={
                "version": 1,
                "disable_existing_loggers": False,
                "formatters": {
                    "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"}
                },
                "handlers": {
                    "console": {"class": "logging.StreamHandler", "formatter": "plain"}
                },
                "loggers": {
                    "django_ood_calibration": {"handlers": ["console"], "level": "INFO"}
                },
            },
        )
    from django.core.management import execute_from_command_line

    execute_from_command_line(argv if argv is not None else sys.argv)


if __name__ == "__main__":
    main()
