fn main() {
    if let Err(err) = cogfactor::cli::run() {
        let payload = serde_json::json!({
            "error": err.to_string(),
            "kind": err.kind(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
