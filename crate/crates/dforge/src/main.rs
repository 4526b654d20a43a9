use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};
use dforge::config::{parse_config, RunConfig, COMMANDS, SEED_ENV};
use dforge::{commands, formats, Error};

fn cli() -> Command {
    let mut cmd = Command::new("dforge")
        .about("Self-supervised pre-training toolkit for disfluency detection")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value config file with [command] sections; flags override it"),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("do not echo the effective configuration"),
        );
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about);
        for key in spec.all_keys() {
            let help = if key.default.is_empty() {
                key.help.to_string()
            } else {
                format!("{} [default: {}]", key.help, key.default)
            };
            sub = sub.arg(Arg::new(key.name).long(key.name).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn run() -> Result<(), Error> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let file = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = formats::read_text(path.as_ref())?;
            Some(parse_config(path, &text)?)
        }
        None => None,
    };
    let spec = dforge::config::CommandSpec::find(name).expect("subcommands come from COMMANDS");
    let flags: Vec<(String, String)> = spec
        .all_keys()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(name, file.as_ref(), &flags, env_seed.as_deref())?;
    if !sub.get_flag("quiet") {
        eprint!("# effective configuration\n{}", cfg.echo());
    }
    commands::run(&cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
