from setuptools import setup

setup(
    name='iib_descriptor',
    packages=['iib_descriptor'],
    py_modules=['iib_descriptor'],
    version='0.1.0',
    install_requires=['numpy', 'pandas', 'scipy', 'imageio', 'click'],
    extras_require={
        'develop': ['pytest']
    },
    entry_points='''
        [console_scripts]
        iib=iib_descriptor.cli:cli
    ''',
    description='Illumination-insensitive multi-channel, multi-granularity binary descriptors.',
    keywords=['binary descriptor', 'feature matching', 'integral image', 'hamming distance'],
    classifiers=[]
)
