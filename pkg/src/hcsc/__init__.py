from .errors import HCSCError
