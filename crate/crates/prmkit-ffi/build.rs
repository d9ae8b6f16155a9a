use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR");
    let header = PathBuf::from(&crate_dir).join("include").join("prmkit.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("PRMKIT_H".to_owned()),
        cpp_compat: true,
        documentation: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            ..Default::default()
        },
        header: Some(
            "/* C interface for prmkit. All functions are thread-safe; error details\n\
             \x20* for the most recent failure on the calling thread come from\n\
             \x20* prmkit_last_error(). */"
                .to_owned(),
        ),
        ..Default::default()
    };

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation failed")
        .write_to_file(header);

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=build.rs");
}
