#![no_main]

use halvingpool_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

const SUBCOMMANDS: [&str; 4] = ["topk-bench", "grad-check", "complexity", "train-toy"];

// First byte picks the subcommand, the rest is the JSON options object.
fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let _ = RunConfig::from_json(SUBCOMMANDS[pick as usize % 4], text);
});
