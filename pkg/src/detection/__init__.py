# Detection package