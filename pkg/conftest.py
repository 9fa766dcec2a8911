import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "modelshift.settings")
django.setup()
