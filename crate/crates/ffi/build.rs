use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let out = dir.join("include").join("gasbound.h");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();

    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.include_guard = Some("GASBOUND_H".into());
    config.cpp_compat = true;
    config.no_includes = true;
    config.sys_includes = vec!["stdbool.h".into(), "stddef.h".into(), "stdint.h".into()];
    config.documentation = true;
    config.enumeration.prefix_with_name = true;
    config.enumeration.rename_variants = cbindgen::RenameRule::ScreamingSnakeCase;
    cbindgen::Builder::new()
        .with_config(config)
        .with_src(dir.join("src/lib.rs"))
        .generate()
        .expect("header generation failed")
        .write_to_file(out);
}
