//! Registers the reference plug-in under the three capabilities the
//! Safe Corp mapping asks for. Each module's entrypoint is a small wrapper
//! script in the workspace's `modules/` directory that execs
//! `sbx-refplugin <mode>`; the catalogue checksum covers the wrapper.

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use sbx_core::catalogue::{ModuleDescriptor, Version};
use sbx_core::digest::sha256_hex;
use sbx_core::rbac::Principal;
use sbx_core::vocab::{Dimension, LicenseClass, Resources};
use sbx_core::workspace::Workspace;

use crate::Fail;

pub const MODULES: [(&str, Dimension, &str); 3] = [
    ("noise-perturbation", Dimension::FinalProduct, "robustness"),
    ("bias-detection", Dimension::DataModels, "fairness"),
    ("output-explainability", Dimension::FinalProduct, "transparency"),
];

pub fn default_plugin_path() -> Result<PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| format!("cannot locate sbx: {e}"))?;
    let p = exe.with_file_name("sbx-refplugin");
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("{} not found; pass --plugin", p.display()))
    }
}

fn wrapper(plugin: &Path, mode: &str) -> String {
    let quoted = plugin.display().to_string().replace('\'', r"'\''");
    format!("#!/bin/sh\nexec '{quoted}' {mode}\n")
}

pub fn install(ws: &Workspace, p: Option<&Principal>, plugin: &Path, overrides: &[String]) -> Result<Vec<String>, Fail> {
    let plugin = std::fs::canonicalize(plugin).map_err(|e| Fail::usage(format!("{}: {e}", plugin.display())))?;
    let mut modes: Vec<(&str, Dimension, String)> = MODULES.iter().map(|(c, d, m)| (*c, *d, m.to_string())).collect();
    for o in overrides {
        let (cap, mode) = o.split_once('=').ok_or_else(|| Fail::usage(format!("mode `{o}` must be CAPABILITY=MODE")))?;
        let slot = modes.iter_mut().find(|m| m.0 == cap).ok_or_else(|| Fail::usage(format!("no reference module provides `{cap}`")))?;
        slot.2 = mode.to_string();
    }
    let dir = ws.root().join("modules");
    std::fs::create_dir_all(&dir).map_err(|e| Fail::runtime(e.to_string()))?;
    let mut ids = Vec::new();
    for (cap, dimension, mode) in modes {
        let script = wrapper(&plugin, &mode);
        let rel = format!("modules/{cap}.sh");
        let path = ws.root().join(&rel);
        std::fs::write(&path, &script).map_err(|e| Fail::runtime(format!("{}: {e}", path.display())))?;
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).map_err(|e| Fail::runtime(e.to_string()))?;
        let d = ModuleDescriptor {
            name: cap.to_string(),
            version: Version::new(1, 0, 0),
            provides: vec![cap.to_string()],
            test_types: vec![cap.to_string()],
            dimension,
            requires: vec![],
            resource_estimate: Resources { cpu_seconds: 30, storage_bytes: 1 << 20 },
            entrypoint: rel,
            checksum: sha256_hex(&script),
            license_class: LicenseClass::Open,
        };
        ids.push(ws.register_module(p, d)?);
    }
    Ok(ids)
}
