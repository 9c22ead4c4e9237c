"""
Published statistics of the OPIXray release
Category counts per split and occlusion-level subsets of the testing set
"""

# Category codes in release column order
CATEGORIES = ['FO', 'ST', 'SC', 'UT', 'MU']

# Names found in release annotation files, plus the "UN" column header of the
# occlusion-level table which denotes the utility knife
CATEGORY_ALIASES = {
    'Folding_Knife': 'FO',
    'Straight_Knife': 'ST',
    'Scissor': 'SC',
    'Utility_Knife': 'UT',
    'Multi-tool_Knife': 'MU',
    'UN': 'UT',
}

# Width, height of every release image
IMAGE_RESOLUTION = (1225, 954)

TRAIN = {
    'num_images': 7109,
    'image_resolution': IMAGE_RESOLUTION,
    'category_counts': {'FO': 1589, 'ST': 809, 'SC': 1494, 'UT': 1635, 'MU': 1612},
}

TEST = {
    'num_images': 1776,
    'image_resolution': IMAGE_RESOLUTION,
    'category_counts': {'FO': 404, 'ST': 235, 'SC': 369, 'UT': 343, 'MU': 430},
    'level_counts': {'OL1': 922, 'OL2': 548, 'OL3': 306},
    'level_category_counts': {
        'OL1': {'FO': 206, 'ST': 88, 'SC': 160, 'UT': 214, 'MU': 255},
        'OL2': {'FO': 148, 'ST': 84, 'SC': 126, 'UT': 88, 'MU': 105},
        'OL3': {'FO': 50, 'ST': 63, 'SC': 83, 'UT': 41, 'MU': 70},
    },
}

TOTAL = {
    'num_images': 8885,
    'image_resolution': IMAGE_RESOLUTION,
    'category_counts': {'FO': 1993, 'ST': 1044, 'SC': 1863, 'UT': 1978, 'MU': 2042},
}

PRESETS = {
    'train': TRAIN,
    'test': TEST,
    'total': TOTAL,
}


def get_expected_distribution(name):
    """
    Get a preset distribution by split name

    Args:
        name (str): 'train', 'test' or 'total'

    Returns:
        dict: Expected counts in manifest layout
    """
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'. Choose from: {', '.join(PRESETS)}")
    preset = PRESETS[name]
    # Copy nested dicts so callers can perturb freely
    return {
        key: ({k: (dict(v) if isinstance(v, dict) else v) for k, v in value.items()}
              if isinstance(value, dict) else value)
        for key, value in preset.items()
    }
