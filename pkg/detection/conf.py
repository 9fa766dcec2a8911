from django.conf import settings

DEFAULTS = {
    "MODELSHIFT_WORKERS": 1,
    "MODELSHIFT_DEFAULT_TRIALS": 10000,
}


def get_setting(name):
    """Read a project setting, falling back to the app default outside a configured project."""
    if settings.configured:
        return getattr(settings, name, DEFAULTS[name])
    return DEFAULTS[name]
