# Core module initialization
__all__ = [
    'config',
    'data',
    'errors',
    'gradcheck',
    'linalg',
    'metalayer',
    'network',
    'ortho',
    'parser',
    'report',
    'runner',
    'system',
    'train',
]
