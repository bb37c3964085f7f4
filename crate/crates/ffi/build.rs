fn main() {
    #[cfg(feature = "gen_h")]
    {
        let dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
        cbindgen::generate(&dir).expect("cbindgen failed").write_to_file(format!("{dir}/include/sinkprune.h"));
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
