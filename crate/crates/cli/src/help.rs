use dualseg::scene::GeneratorConfig;
use dualseg::trainer::RunConfig;

const RUN_KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization and scene order"),
    ("epochs", "training epochs"),
    ("phase1_fraction", "share of epochs on labeled scenes only"),
    ("steps_per_epoch", "optimizer steps per epoch; null = one per labeled scene"),
    ("lr", "SGD learning rate"),
    ("lambda_c", "weight of the cross-modal consistency loss"),
    ("t_conf", "confidence threshold for pseudo labels"),
    ("t_ema", "EMA teacher decay"),
    ("heads", "attention heads of the fusion module"),
    ("views_per_scene", "camera views used per scene"),
    ("window", "odd window for label densification and 3D votes"),
    ("voxel_size", "3D grid cell size in meters"),
    ("widths_3d", "channels per 3D scale"),
    ("widths_2d", "channels per 2D scale"),
    ("max_grid_extent", "largest 3D grid extent per axis"),
    ("eval_every", "validate every N epochs (the last is always validated)"),
    ("plo_debug", "write per-view pseudo-label statistics"),
    ("ablation.pseudo_labels", "train on teacher pseudo labels in phase 2"),
    ("ablation.ema", "teacher is the EMA of the student"),
    ("ablation.plo_consistency", "filter pseudo labels across modalities and add the consistency loss"),
    ("ablation.dmf", "attention fusion between the branches"),
];

const GEN_KEYS: &[(&str, &str)] = &[
    ("seed", "dataset seed"),
    ("n_train", "training scenes"),
    ("n_val", "validation scenes"),
    ("labeled_ratio", "share of training scenes that keep labels"),
    ("generator.num_classes", "semantic classes"),
    ("generator.room", "room extents (x, y, z) in meters"),
    ("generator.num_points", "points per scene"),
    ("generator.objects_per_class", "inclusive range of instances per object class"),
    ("generator.class_shares", "target point share per class; null = default split"),
    ("generator.color_noise", "std-dev of per-point color noise"),
    ("generator.brightness", "per-scene brightness factor range"),
    ("generator.image_size", "image height and width"),
    ("generator.n_views", "views rendered per scene"),
    ("generator.fov_deg", "camera field of view in degrees"),
];

fn lookup<'a>(value: &'a serde_json::Value, key: &str) -> &'a serde_json::Value {
    key.split('.').fold(value, |v, k| &v[k])
}

fn table(title: &str, keys: &[(&str, &str)], defaults: &serde_json::Value, prefix: &str) -> String {
    let width = keys.iter().map(|(k, _)| k.len() + prefix.len()).max().unwrap_or(0);
    let mut out = format!("{title}\n");
    for (key, desc) in keys {
        let default = lookup(defaults, key);
        out.push_str(&format!("  {:width$}  {desc} [default: {default}]\n", format!("{prefix}{key}")));
    }
    out
}

fn run_defaults() -> serde_json::Value {
    serde_json::to_value(RunConfig::default()).expect("run config serializes")
}

pub fn run_keys() -> String {
    table("Config keys (JSON object; omitted keys take the default):", RUN_KEYS, &run_defaults(), "")
}

pub fn ablate_keys() -> String {
    let mut out = String::from("Config keys (JSON object; omitted keys take the default):\n");
    out.push_str("  seeds  seeds averaged per model [default: [0]]\n");
    out.push_str(&table("Training keys under \"run\" (ablation flags are set per model):", RUN_KEYS, &run_defaults(), "run."));
    out
}

pub fn gen_data_keys() -> String {
    let defaults = serde_json::json!({
        "seed": 0, "n_train": 64, "n_val": 16, "labeled_ratio": 0.1,
        "generator": GeneratorConfig::default(),
    });
    table("Config keys (JSON object; omitted keys take the default):", GEN_KEYS, &defaults, "")
}
