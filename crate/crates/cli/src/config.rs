// placeholder while the core crate lands
