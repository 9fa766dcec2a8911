from django.apps import AppConfig

class ChangeDetectionConfig(AppConfig):
    name = 'detection'
    verbose_name = "Model Change Detection"
