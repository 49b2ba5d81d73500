#![no_main]

use libfuzzer_sys::fuzz_target;

// Argument parsing only: every generated command line names a subcommand
// with `--help` appended, so nothing touches the filesystem.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut args: Vec<&str> = vec!["gleak"];
        args.extend(text.split('\0'));
        args.push("--help");
        let code = gleak::cli::run(args);
        assert!(code == 0 || code == 4);
    }
});
