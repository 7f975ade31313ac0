from soupforge._soupforge import *  # noqa: F401,F403
from soupforge._soupforge import __version__  # noqa: F401
