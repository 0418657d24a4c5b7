from em_superres.models.volume import *  # noqa: F403
from em_superres.models.codes import *  # noqa: F403
from em_superres.models.dictionary import *  # noqa: F403
from em_superres.models.tomography import *  # noqa: F403
from em_superres.models.reconstruction import *  # noqa: F403
from em_superres.models.evaluation import *  # noqa: F403
from em_superres.models.phantom import *  # noqa: F403
