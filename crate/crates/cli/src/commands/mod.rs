mod dream;
mod fed;
mod model;
mod nonn;
mod sim;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::args::{Cli, Command};
use crate::config::{resolve_seed, Loaded, SeedSource};
use crate::manifest::{ManifestBuilder, Outputs};
use crate::CliResult;

/// What every command gets: parsed flags and the raw argv for the manifest.
pub(crate) struct Ctx<'a> {
    pub cli: &'a Cli,
    pub argv: &'a [OsString],
}

impl Ctx<'_> {
    pub fn seed(&self, config: Option<u64>) -> CliResult<(u64, SeedSource)> {
        resolve_seed(self.cli.seed, config)
    }

    /// Hashes the config and inputs, creates `out` and writes the manifest.
    pub fn start<T>(
        &self,
        out: &Path,
        config: Option<&Loaded<T>>,
        inputs: Vec<PathBuf>,
        seed: (u64, SeedSource),
    ) -> CliResult<Outputs> {
        let manifest = ManifestBuilder {
            command: self.cli.command.name(),
            argv: self.argv,
            config: config.map(|c| (c.path.as_path(), c.bytes.as_slice())),
            inputs,
            seed: seed.0,
            seed_source: seed.1,
        }
        .build()?;
        let outputs = Outputs::create(out)?;
        outputs.write_manifest(&manifest)?;
        Ok(outputs)
    }
}

pub(crate) fn dispatch(cli: &Cli, argv: &[OsString]) -> CliResult<()> {
    let ctx = Ctx { cli, argv };
    match &cli.command {
        Command::Count(a) => model::count(&ctx, a),
        Command::Zoo(z) => model::zoo(z),
        Command::Train(a) => model::train(&ctx, a),
        Command::Fed(a) => fed::run(&ctx, a),
        Command::Dream(d) => dream::run(&ctx, d),
        Command::Nonn(n) => nonn::run(&ctx, n),
        Command::Topology(a) => sim::topology(&ctx, a),
        Command::Sim(a) => sim::simulate(&ctx, a),
        Command::Compare(a) => sim::compare(&ctx, a),
    }
}
