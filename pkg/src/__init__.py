"""Source package for occluded prohibited item detection in X-ray images"""
