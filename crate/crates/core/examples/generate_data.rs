//! Writes a synthetic source/target corpus as raw `.f64` signals plus CSV
//! manifests, then loads it back through the manifest reader.
//!
//! cargo run --example generate_data -- [output-dir]

use std::path::PathBuf;

use protoadapt::data::{
    load_manifest, write_manifest, write_signal_f64, Domain, ManifestEntry, SynthConfig, WindowSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("protoadapt-data"));
    let spec = SynthConfig {
        class_count: 4,
        seed: 3,
        ..SynthConfig::default()
    }
    .to_spec()?;
    let window = WindowSpec::default();
    let per_class = 10;
    std::fs::create_dir_all(&out)?;

    for domain in [Domain::Source, Domain::Target] {
        let shift = spec.shift(domain);
        println!(
            "{domain}: amplitude x{}, frequency {:+} Hz, noise {}",
            shift.amplitude_scale, shift.frequency_offset_hz, shift.noise_std
        );
        let mut entries = Vec::new();
        for class in 0..spec.classes.len() {
            let signal = spec.class_signal(class, domain, window.signal_len(per_class))?;
            let file = out.join(format!("{domain}_{class}.f64"));
            write_signal_f64(&file, signal.samples())?;
            entries.push(ManifestEntry {
                file,
                label: class,
                domain,
                line: 0,
            });
        }
        let manifest = out.join(format!("{domain}.csv"));
        write_manifest(&manifest, &entries)?;
        let data = load_manifest(&manifest, window, None)?;
        println!("  {} -> {} windows, per class {:?}", manifest.display(), data.len(), data.per_class_counts());
    }
    Ok(())
}
