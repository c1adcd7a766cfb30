//! Implementations behind the CLI subcommands: load inputs, call into the
//! core library, write outputs plus a manifest.
//!
//! Output naming is a stable contract. `simulate` writes `sinogram.f32`,
//! `body.f32`, `metal_mask.f32`, `geometry.json`, and `spectrum.csv`;
//! `reconstruct` writes `recon.f32`, `checkpoint.{json,bin}`, and `loss.csv`;
//! the baselines write `fbp.f32` or `li_sinogram.f32` plus `li_fbp.f32`.
//! Each command's manifest lands in the same directory as its outputs.

use std::path::{Path, PathBuf};

use polyct_core::io;
use polyct_core::phantom::Sinogram;
use polyct_core::{
    extract_image, fbp, li_inpaint, metal_trace, psnr, ssim, train, Error, FanBeamGeometry,
    FilterWindow, Grid2, MetalMask, Preset, Result, Spectrum,
};

use crate::{
    EvalArgs, FbpArgs, LiArgs, PngArgs, ReconstructArgs, SimulateArgs, SpectrumArgs,
};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_window(name: &str) -> FilterWindow {
    match name {
        "hann" => FilterWindow::Hann,
        _ => FilterWindow::RamLak,
    }
}

/// Load a sinogram array and its geometry, checking that they agree.
fn load_sinogram(sinogram: &Path, geometry: &Path) -> Result<Sinogram> {
    let geometry = io::read_geometry(geometry)?;
    let (data, sidecar) = io::read_array(sinogram)?;
    let expected = [geometry.num_angles, geometry.num_detectors];
    if sidecar.shape != expected {
        return Err(Error::ShapeMismatch(format!(
            "sinogram shape {:?} does not match geometry {:?}",
            sidecar.shape, expected
        )));
    }
    Sinogram::from_vec(geometry, data)
}

fn load_mask_for(mask: &Path, geometry: &FanBeamGeometry) -> Result<MetalMask> {
    let mask = io::read_mask(mask)?;
    if mask.height() != geometry.image_height || mask.width() != geometry.image_width {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} does not match the {}x{} image",
            mask.height(),
            mask.width(),
            geometry.image_height,
            geometry.image_width
        )));
    }
    Ok(mask)
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let mut preset = Preset::by_name(&args.preset)?;
    preset.simulate.seed = args.seed;
    preset.simulate.noise = args.noise;
    preset.simulate.photons_per_ray = args.photons;
    let n_energies = args.n_energies.unwrap_or(preset.train.n_energies);
    let spectrum = Spectrum::synthetic_source(n_energies, preset.train.energy_range)?;

    let body = preset.body_image();
    let mask = preset.metal_mask();
    let phantom = preset.phantom(spectrum.energies())?;
    log::info!(
        "simulating {}: {} angles x {} detectors, {} energy levels",
        preset.name,
        preset.geometry.num_angles,
        preset.geometry.num_detectors,
        n_energies
    );
    let sino = polyct_core::simulate_sinogram(&phantom, &preset.geometry, &spectrum, &preset.simulate)?;

    ensure_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    io::write_geometry(&dir.join("geometry.json"), &preset.geometry)?;
    io::write_spectrum(&dir.join("spectrum.csv"), &spectrum)?;
    io::write_grid(&dir.join("body.f32"), &body, "1/mm", "image")?;
    io::write_mask(&dir.join("metal_mask.f32"), &mask)?;
    io::write_array(
        &dir.join("sinogram.f32"),
        sino.data(),
        &[preset.geometry.num_angles, preset.geometry.num_detectors],
        "dimensionless",
        "sinogram",
    )?;

    let mut manifest = io::Manifest::new("simulate");
    manifest.set("preset", &preset)?;
    manifest.set("seed", args.seed)?;
    manifest.set("noise", args.noise)?;
    manifest.set("photons", args.photons)?;
    manifest.set("n_energies", n_energies)?;
    manifest.outputs = ["geometry.json", "spectrum.csv", "body.f32", "metal_mask.f32", "sinogram.f32"]
        .map(String::from)
        .to_vec();
    io::write_manifest(&dir.join("manifest_simulate.json"), &manifest)?;
    log::info!("simulate outputs written to {}", dir.display());
    Ok(())
}

pub fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let sino = load_sinogram(&args.sinogram, &args.geometry)?;
    let mask = load_mask_for(&args.mask, &sino.geometry)?;

    let mut config = Preset::by_name(&args.preset)?.train;
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_rays {
        config.batch_rays = v;
    }
    if let Some(v) = args.n_energies {
        config.n_energies = v;
    }
    if let Some(v) = args.energy_range {
        config.energy_range = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;

    let source = io::read_spectrum(&args.spectrum)?;
    let spectrum = source.resample(config.n_energies, config.energy_range)?;

    log::info!(
        "training: lambda {}, {} epochs, {} energy levels, seed {}",
        config.lambda,
        config.epochs,
        config.n_energies,
        config.seed
    );
    let outcome = train(&sino, &spectrum, &mask, &config)?;
    let recon = extract_image(&outcome.params, &sino.geometry, &spectrum)?;

    ensure_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    io::write_grid(&dir.join("recon.f32"), &recon, "1/mm", "image")?;
    io::save_checkpoint(&dir.join("checkpoint"), &outcome.params)?;
    io::write_loss_csv(&dir.join("loss.csv"), &outcome.history)?;

    let mut manifest = io::Manifest::new("reconstruct");
    manifest.set("preset", &args.preset)?;
    manifest.set("train", &config)?;
    for input in [&args.sinogram, &args.geometry, &args.spectrum, &args.mask] {
        manifest.add_input(input)?;
    }
    manifest.outputs =
        ["recon.f32", "checkpoint.json", "checkpoint.bin", "loss.csv"].map(String::from).to_vec();
    io::write_manifest(&dir.join("manifest_reconstruct.json"), &manifest)?;
    log::info!("reconstruction written to {}", dir.display());
    Ok(())
}

pub fn baseline_fbp(args: FbpArgs) -> Result<()> {
    let sino = load_sinogram(&args.sinogram, &args.geometry)?;
    let image = fbp(&sino, parse_window(&args.window))?;
    ensure_dir(&args.out_dir)?;
    io::write_grid(&args.out_dir.join("fbp.f32"), &image, "1/mm", "image")?;
    let mut manifest = io::Manifest::new("baseline fbp");
    manifest.set("window", &args.window)?;
    for input in [&args.sinogram, &args.geometry] {
        manifest.add_input(input)?;
    }
    manifest.outputs = vec!["fbp.f32".into()];
    io::write_manifest(&args.out_dir.join("manifest_baseline_fbp.json"), &manifest)?;
    log::info!("fbp baseline written to {}", args.out_dir.display());
    Ok(())
}

pub fn baseline_li(args: LiArgs) -> Result<()> {
    let sino = load_sinogram(&args.sinogram, &args.geometry)?;
    let mask = load_mask_for(&args.mask, &sino.geometry)?;
    let trace = metal_trace(&mask, &sino.geometry)?;
    let inpainted = li_inpaint(&sino, &trace)?;
    let image = fbp(&inpainted, parse_window(&args.window))?;
    ensure_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    io::write_array(
        &dir.join("li_sinogram.f32"),
        inpainted.data(),
        &[sino.geometry.num_angles, sino.geometry.num_detectors],
        "dimensionless",
        "sinogram",
    )?;
    io::write_grid(&dir.join("li_fbp.f32"), &image, "1/mm", "image")?;
    let mut manifest = io::Manifest::new("baseline li");
    manifest.set("window", &args.window)?;
    manifest.set("trace_bins", trace.count())?;
    for input in [&args.sinogram, &args.geometry, &args.mask] {
        manifest.add_input(input)?;
    }
    manifest.outputs = ["li_sinogram.f32", "li_fbp.f32"].map(String::from).to_vec();
    io::write_manifest(&dir.join("manifest_baseline_li.json"), &manifest)?;
    log::info!("li baseline written to {}", dir.display());
    Ok(())
}

/// JSON value for a PSNR that may be the infinite sentinel.
fn psnr_value(db: f64) -> serde_json::Value {
    if db.is_finite() {
        serde_json::json!(db)
    } else {
        serde_json::json!("inf")
    }
}

/// Region-restricted SSIM: metal pixels in both images are replaced by the
/// reference values, so only non-metal differences contribute.
fn ssim_outside_metal(reference: &Grid2, test: &Grid2, mask: &MetalMask, range: f64) -> Result<f64> {
    let mut patched = test.clone();
    for (i, &is_metal) in mask.data().iter().enumerate() {
        if is_metal {
            patched.data_mut()[i] = reference.data()[i];
        }
    }
    ssim(reference, &patched, range)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (reference, _) = io::read_grid(&args.reference)?;
    let (test, _) = io::read_grid(&args.test)?;
    let range = reference.max_value();
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference maximum {range} cannot serve as a data range"
        )));
    }

    let full_psnr = psnr(&reference, &test, range, None)?;
    let full_ssim = ssim(&reference, &test, range)?;
    let mut report = serde_json::json!({
        "data_range": range,
        "full": { "psnr_db": psnr_value(full_psnr), "ssim": full_ssim, "region": "full" },
    });
    log::info!("full image: psnr {full_psnr:.2} dB, ssim {full_ssim:.4}");

    if let Some(mask_path) = &args.mask {
        let mask = io::read_mask(mask_path)?;
        let non_metal = mask.invert();
        let region_psnr = psnr(&reference, &test, range, Some(&non_metal))?;
        let region_ssim = ssim_outside_metal(&reference, &test, &mask, range)?;
        report["non_metal"] = serde_json::json!({
            "psnr_db": psnr_value(region_psnr),
            "ssim": region_ssim,
            "region": "non-metal",
        });
        log::info!("non-metal region: psnr {region_psnr:.2} dB, ssim {region_ssim:.4}");
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&args.out, text)?;

    let mut manifest = io::Manifest::new("eval");
    manifest.add_input(&args.reference)?;
    manifest.add_input(&args.test)?;
    if let Some(mask_path) = &args.mask {
        manifest.add_input(mask_path)?;
    }
    manifest.outputs = vec![args.out.file_name().unwrap_or_default().to_string_lossy().into_owned()];
    io::write_manifest(&manifest_path_for(&args.out), &manifest)?;
    Ok(())
}

pub fn png(args: PngArgs) -> Result<()> {
    let (grid, _) = io::read_grid(&args.input)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    io::export_png(&args.out, &grid, args.window.0, args.window.1)?;
    let mut manifest = io::Manifest::new("png");
    manifest.set("window", [args.window.0, args.window.1])?;
    manifest.add_input(&args.input)?;
    manifest.outputs = vec![args.out.file_name().unwrap_or_default().to_string_lossy().into_owned()];
    io::write_manifest(&manifest_path_for(&args.out), &manifest)?;
    log::info!("png written to {}", args.out.display());
    Ok(())
}

pub fn spectrum(args: SpectrumArgs) -> Result<()> {
    let spectrum = match args.kind.as_str() {
        "uniform" => Spectrum::uniform(args.n, args.range)?,
        _ => Spectrum::synthetic_source(args.n, args.range)?,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    io::write_spectrum(&args.out, &spectrum)?;
    let mut manifest = io::Manifest::new("spectrum");
    manifest.set("kind", &args.kind)?;
    manifest.set("n", args.n)?;
    manifest.set("range", [args.range.0, args.range.1])?;
    manifest.outputs = vec![args.out.file_name().unwrap_or_default().to_string_lossy().into_owned()];
    io::write_manifest(&manifest_path_for(&args.out), &manifest)?;
    log::info!("{} spectrum with {} levels written to {}", args.kind, args.n, args.out.display());
    Ok(())
}

/// Manifest path for commands whose primary output is a single file.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
