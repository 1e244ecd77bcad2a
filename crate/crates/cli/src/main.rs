use std::process::ExitCode;

fn main() -> ExitCode {
    attn_memcap::main_with_args(std::env::args_os())
}
