from ecfse.models.models import *  # noqa: F403
