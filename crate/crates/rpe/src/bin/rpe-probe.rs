//! Probe program for transparency checks.
//!
//! Prints its observable execution context to stdout: argv, environment
//! (verbatim order and bytes), cwd, umask, ids, and the state of file
//! descriptors 0-9. Remote execution is transparent exactly when this
//! output matches a local run byte for byte. Pids are deliberately never
//! printed.
//!
//! Extras for exit-fidelity tests: `--exit N` exits with code N,
//! `--signal N` raises fatal signal N, `--spin SECS` sleeps (giving a
//! signal time to arrive), `--write-fd N TEXT` writes TEXT to fd N.

use std::io::Write;
use std::os::unix::ffi::OsStrExt;

fn main() {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let mut i = 1;
    while i < args.len() {
        match args[i].to_str() {
            Some("--exit") => {
                let code: i32 = args[i + 1].to_str().unwrap().parse().unwrap();
                dump();
                std::process::exit(code);
            }
            Some("--signal") => {
                let signo: i32 = args[i + 1].to_str().unwrap().parse().unwrap();
                unsafe {
                    libc::signal(signo, libc::SIG_DFL);
                    libc::raise(signo);
                }
                // a fatal signal should not return
                std::process::exit(98);
            }
            Some("--spin") => {
                let secs: f64 = args[i + 1].to_str().unwrap().parse().unwrap();
                std::thread::sleep(std::time::Duration::from_secs_f64(secs));
                i += 2;
                continue;
            }
            Some("--write-fd") => {
                let fd: i32 = args[i + 1].to_str().unwrap().parse().unwrap();
                let text = args[i + 2].as_os_str().as_bytes();
                unsafe {
                    libc::write(fd, text.as_ptr() as *const libc::c_void, text.len());
                }
                i += 3;
                continue;
            }
            _ => {
                i += 1;
                continue;
            }
        }
    }
    dump();
}

fn dump() {
    let out = std::io::stdout();
    let mut out = out.lock();

    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    writeln!(out, "argc:{}", args.len()).unwrap();
    for (i, a) in args.iter().enumerate() {
        out.write_all(format!("argv{i}:").as_bytes()).unwrap();
        out.write_all(a.as_bytes()).unwrap();
        out.write_all(b"\n").unwrap();
    }

    let cwd = std::env::current_dir().unwrap_or_default();
    out.write_all(b"cwd:").unwrap();
    out.write_all(cwd.as_os_str().as_bytes()).unwrap();
    out.write_all(b"\n").unwrap();

    let umask = unsafe {
        let old = libc::umask(0);
        libc::umask(old);
        old
    };
    writeln!(out, "umask:{umask:04o}").unwrap();

    unsafe {
        writeln!(out, "uid:{} gid:{}", libc::getuid(), libc::getgid()).unwrap();
        let n = libc::getgroups(0, std::ptr::null_mut());
        let mut groups = vec![0 as libc::gid_t; n.max(0) as usize];
        let n = libc::getgroups(n, groups.as_mut_ptr());
        groups.truncate(n.max(0) as usize);
        let list: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
        writeln!(out, "groups:{}", list.join(",")).unwrap();
    }

    for fd in 0..10 {
        let flags = unsafe { libc::fcntl(fd, libc::F_GETFL) };
        if flags < 0 {
            writeln!(out, "fd{fd}:closed").unwrap();
            continue;
        }
        let access = match flags & libc::O_ACCMODE {
            libc::O_RDONLY => "r",
            libc::O_WRONLY => "w",
            libc::O_RDWR => "rw",
            _ => "?",
        };
        let pos = unsafe { libc::lseek(fd, 0, libc::SEEK_CUR) };
        if pos < 0 {
            writeln!(out, "fd{fd}:open {access} pos=-").unwrap();
        } else {
            writeln!(out, "fd{fd}:open {access} pos={pos}").unwrap();
        }
    }

    // environment verbatim, last: arbitrary bytes and embedded newlines
    // smear lines but stay byte-comparable
    extern "C" {
        static environ: *const *const libc::c_char;
    }
    let mut env: Vec<&[u8]> = Vec::new();
    unsafe {
        let mut p = environ;
        while !p.is_null() && !(*p).is_null() {
            env.push(std::ffi::CStr::from_ptr(*p).to_bytes());
            p = p.add(1);
        }
    }
    writeln!(out, "env-count:{}", env.len()).unwrap();
    for e in env {
        out.write_all(b"env:").unwrap();
        out.write_all(e).unwrap();
        out.write_all(b"\n").unwrap();
    }
    out.flush().unwrap();
}
